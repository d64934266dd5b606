//! Pipeline configuration: a TOML file plus `key=value` overrides.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ensemble::LearnConfig;
use crate::error::{Error, Result};
use crate::negatives::KgeConfig;
use crate::retriever::RetrievalConfig;
use crate::scorer::Aggregation;
use crate::selector::{FilterThresholds, SelectionConfig};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub kg: PathBuf,
    pub labels: Option<PathBuf>,
    pub general: Vec<PathBuf>,
    pub reliable: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    pub ratios: [f64; 3],
    pub sub_ratio: f64,
    pub nested: bool,
    /// Relations evaluated; empty means all.
    pub eval_relations: Vec<String>,
    pub min_label_coverage: f64,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self {
            ratios: [0.8, 0.1, 0.1],
            sub_ratio: 1.0,
            nested: false,
            eval_relations: Vec::new(),
            min_label_coverage: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MineSection {
    pub theta: usize,
    pub phrase_min_count: usize,
    pub phrase_pmi_floor: f64,
    pub min_support: usize,
    pub max_window: usize,
}

impl Default for MineSection {
    fn default() -> Self {
        Self {
            theta: 500,
            phrase_min_count: 5,
            phrase_pmi_floor: 3.0,
            min_support: crate::miner::DEFAULT_MIN_SUPPORT,
            max_window: crate::miner::DEFAULT_MAX_WINDOW,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectSection {
    pub quality_floor: f64,
    pub middle_floor: f64,
    pub max_candidates: usize,
    pub max_iterations: usize,
    pub penalty: f64,
    pub positive: f64,
    pub negative: f64,
    /// Optional seed prompt per relation, e.g. `"[X] lived in [Y]"`.
    pub seeds: BTreeMap<String, String>,
    /// Hand-written prompts that replace mining for a relation.
    pub manual: BTreeMap<String, Vec<String>>,
}

impl Default for SelectSection {
    fn default() -> Self {
        let s = SelectionConfig::default();
        Self {
            quality_floor: s.quality_floor,
            middle_floor: s.middle_floor,
            max_candidates: s.max_candidates,
            max_iterations: s.max_iterations,
            penalty: s.thresholds.penalty,
            positive: s.thresholds.positive,
            negative: s.thresholds.negative,
            seeds: BTreeMap::new(),
            manual: BTreeMap::new(),
        }
    }
}

impl SelectSection {
    pub fn selection(&self) -> SelectionConfig {
        SelectionConfig {
            quality_floor: self.quality_floor,
            middle_floor: self.middle_floor,
            max_candidates: self.max_candidates,
            max_iterations: self.max_iterations,
            thresholds: FilterThresholds {
                penalty: self.penalty,
                positive: self.positive,
                negative: self.negative,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizeSection {
    /// Off keeps uniform weights.
    pub enabled: bool,
    pub held_out: f64,
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for OptimizeSection {
    fn default() -> Self {
        let l = LearnConfig::default();
        Self {
            enabled: true,
            held_out: l.held_out,
            epochs: l.max_iterations,
            learning_rate: l.learning_rate,
        }
    }
}

impl OptimizeSection {
    pub fn learn(&self) -> LearnConfig {
        LearnConfig {
            learning_rate: self.learning_rate,
            max_iterations: self.epochs,
            held_out: self.held_out,
            ..LearnConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalSection {
    /// Off leaves every support slot empty.
    pub enabled: bool,
    pub delta: f64,
    pub phi: usize,
    pub k1: f64,
    pub b: f64,
    pub deterministic: bool,
    /// Query-wise support skips passages naming an answer the training graph
    /// already holds for that query.
    pub skip_known: bool,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        let r = RetrievalConfig::default();
        Self {
            enabled: true,
            delta: r.delta,
            phi: r.phi,
            k1: r.k1,
            b: r.b,
            deterministic: r.deterministic,
            skip_known: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NegativesSection {
    pub m_ratio: usize,
    pub kge_fraction: f64,
    /// Recall size; 0 picks the benchmark table entry, else all entities.
    pub recall_size: usize,
    pub dataset: String,
    pub inject_gold: bool,
    pub kge_dim: usize,
    pub kge_epochs: usize,
    pub kge_learning_rate: f64,
    pub kge_margin: f64,
}

impl Default for NegativesSection {
    fn default() -> Self {
        let k = KgeConfig::default();
        Self {
            m_ratio: 30,
            kge_fraction: 0.5,
            recall_size: 0,
            dataset: String::new(),
            inject_gold: false,
            kge_dim: k.dim,
            kge_epochs: k.epochs,
            kge_learning_rate: k.learning_rate,
            kge_margin: k.margin,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MReading {
    /// Negative terms divided by the number of negatives per positive.
    #[default]
    NegativesPerPositive,
    /// Negative terms divided by |T⁺| / |T⁻|.
    PositiveNegativeRatio,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub learning_rate: f64,
    pub m_reading: MReading,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 200,
            learning_rate: 1.0,
            m_reading: MReading::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerMode {
    #[default]
    Reference,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScorerSection {
    pub mode: ScorerMode,
    pub url: String,
    pub timeout_secs: u64,
    pub aggregation: Aggregation,
}

impl Default for ScorerSection {
    fn default() -> Self {
        Self {
            mode: ScorerMode::Reference,
            url: "http://127.0.0.1:8080".into(),
            timeout_secs: 60,
            aggregation: Aggregation::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub classify_threshold: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { classify_threshold: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub run_dir: PathBuf,
    pub paths: Paths,
    pub split: SplitSection,
    pub mine: MineSection,
    pub select: SelectSection,
    pub optimize: OptimizeSection,
    pub retrieval: RetrievalSection,
    pub negatives: NegativesSection,
    pub train: TrainSection,
    pub scorer: ScorerSection,
    pub eval: EvalSection,
}

impl PipelineConfig {
    pub fn defaults() -> Self {
        Self {
            seed: 55,
            run_dir: PathBuf::from("run"),
            ..Default::default()
        }
    }

    /// Parse TOML, apply `key=value` overrides, then validate. Relative paths
    /// resolve against `base`.
    pub fn from_toml(text: &str, overrides: &[String], base: &Path) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("<file>", e.to_string()))?;
        if !table.contains_key("seed") {
            table.insert("seed".into(), toml::Value::Integer(55));
        }
        if !table.contains_key("run_dir") {
            table.insert("run_dir".into(), toml::Value::String("run".into()));
        }
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut config: PipelineConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(field_of(&e), e.message().to_string()))?;
        config.resolve(base);
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, overrides, base)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.run_dir);
        fix(&mut self.paths.kg);
        if let Some(l) = self.paths.labels.as_mut() {
            fix(l);
        }
        self.paths.general.iter_mut().for_each(fix);
        self.paths.reliable.iter_mut().for_each(fix);
    }

    pub fn validate(&self) -> Result<()> {
        if self.paths.kg.as_os_str().is_empty() {
            return Err(Error::config("paths.kg", "required"));
        }
        if self.paths.reliable.is_empty() && self.paths.general.is_empty() {
            return Err(Error::config("paths.reliable", "at least one corpus is required"));
        }
        self.split_spec().validate()?;
        if !(0.0..=1.0).contains(&self.split.min_label_coverage) {
            return Err(Error::config("split.min_label_coverage", "must lie in [0, 1]"));
        }
        if self.mine.theta < 1 {
            return Err(Error::config("mine.theta", "must be at least 1"));
        }
        if self.mine.min_support < 1 {
            return Err(Error::config("mine.min_support", "must be at least 1"));
        }
        if self.mine.max_window < 2 {
            return Err(Error::config("mine.max_window", "must be at least 2"));
        }
        let s = &self.select;
        for (field, v) in [
            ("select.quality_floor", s.quality_floor),
            ("select.penalty", s.penalty),
            ("select.positive", s.positive),
            ("select.negative", s.negative),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(field, "must lie in [0, 1]"));
            }
        }
        if s.negative > s.positive {
            return Err(Error::config("select.negative", "must not exceed select.positive"));
        }
        if !(self.optimize.held_out > 0.0 && self.optimize.held_out < 1.0) {
            return Err(Error::config("optimize.held_out", "must lie in (0, 1)"));
        }
        self.retrieval_config().validate()?;
        if self.negatives.m_ratio < 1 {
            return Err(Error::config("negatives.m_ratio", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.negatives.kge_fraction) {
            return Err(Error::config("negatives.kge_fraction", "must lie in [0, 1]"));
        }
        if self.negatives.kge_dim < 1 {
            return Err(Error::config("negatives.kge_dim", "must be at least 1"));
        }
        if self.scorer.mode == ScorerMode::Remote && self.scorer.url.is_empty() {
            return Err(Error::config("scorer.url", "required for remote mode"));
        }
        let t = self.eval.classify_threshold;
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::config("eval.classify_threshold", "must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn split_spec(&self) -> crate::kg::SplitSpec {
        crate::kg::SplitSpec {
            ratios: self.split.ratios,
            sub_ratio: self.split.sub_ratio,
            seed: self.seed,
            nested: self.split.nested,
        }
    }

    pub fn retrieval_config(&self) -> RetrievalConfig {
        RetrievalConfig {
            delta: self.retrieval.delta,
            phi: self.retrieval.phi,
            k1: self.retrieval.k1,
            b: self.retrieval.b,
            seed: crate::rng::fnv1a64(format!("{}:support", self.seed).as_bytes()),
            deterministic: self.retrieval.deterministic,
        }
    }

    pub fn kge_config(&self) -> KgeConfig {
        KgeConfig {
            dim: self.negatives.kge_dim,
            epochs: self.negatives.kge_epochs,
            learning_rate: self.negatives.kge_learning_rate,
            margin: self.negatives.kge_margin,
            seed: self.seed,
        }
    }

    /// Stable hash of the effective configuration.
    /// Hash of every setting except where the run is written.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = value.as_object_mut() {
            map.remove("run_dir");
        }
        let json = serde_json::to_vec(&value).expect("config serializes");
        crate::checksum::sha256_bytes(&json)
    }
}

fn field_of(e: &toml::de::Error) -> String {
    let msg = e.message();
    // serde reports unknown fields as "unknown field `x`, expected ...".
    msg.split('`').nth(1).map(str::to_string).unwrap_or_else(|| "<config>".to_string())
}

/// `a.b.c=value`; the value is parsed as TOML, falling back to a bare string.
fn apply_override(table: &mut toml::Table, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::config(item, "override must look like key=value"))?;
    let key = key.trim();
    let value: toml::Value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let (last, path) = parts.split_last().ok_or_else(|| Error::config(key, "empty key"))?;
    let mut cursor = table;
    for p in path {
        cursor = cursor
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::config(key, format!("{p} is not a section")))?;
    }
    cursor.insert(last.to_string(), value);
    Ok(())
}
