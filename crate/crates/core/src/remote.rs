//! HTTP/JSON client for an external model service speaking the `v1` protocol.

use std::time::Duration;

use reqwest::blocking::{Client, Response};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, ScorerError};
use crate::retriever::ClozeInstance;
use crate::scorer::{ClassificationScore, FinetuneConfig, FinetuneReport, Scorer};

const PROB_TOLERANCE: f64 = 1e-6;

#[derive(Serialize)]
struct ScoreClozeRequest<'a> {
    text: &'a str,
    candidates: &'a [String],
}

#[derive(Deserialize)]
struct ScoreClozeResponse {
    probs: Vec<f64>,
}

#[derive(Serialize)]
struct ClassifyRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct ClassifyResponse {
    c0: f64,
    c1: f64,
}

#[derive(Serialize)]
struct FinetuneInstance {
    text: String,
    label: u8,
}

#[derive(Serialize)]
struct FinetuneRequest {
    instances: Vec<FinetuneInstance>,
    m_ratio: u64,
    epochs: usize,
}

#[derive(Deserialize)]
struct FinetuneResponse {
    model_version: String,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct Health {
    pub status: String,
    pub model: String,
}

#[derive(Deserialize)]
struct ErrorBody {
    error: String,
}

pub struct RemoteScorer {
    base: String,
    client: Client,
}

impl RemoteScorer {
    pub fn new(base_url: &str, timeout: Duration) -> Result<Self> {
        let client = Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ScorerError::Transport(e.to_string()))?;
        Ok(Self {
            base: base_url.trim_end_matches('/').to_string(),
            client,
        })
    }

    fn url(&self, path: &str) -> String {
        format!("{}/v1/{path}", self.base)
    }

    fn decode<T: DeserializeOwned>(response: Response) -> std::result::Result<T, ScorerError> {
        let status = response.status();
        let body = response.text().map_err(|e| ScorerError::Transport(e.to_string()))?;
        if status.is_client_error() {
            let message = serde_json::from_str::<ErrorBody>(&body).map(|b| b.error).unwrap_or(body);
            return Err(ScorerError::Rejected {
                status: status.as_u16(),
                message,
            });
        }
        if !status.is_success() {
            let message = serde_json::from_str::<ErrorBody>(&body).map(|b| b.error).unwrap_or(body);
            return Err(ScorerError::Failed {
                status: status.as_u16(),
                message,
            });
        }
        serde_json::from_str(&body).map_err(|e| ScorerError::Protocol(format!("{e}: {body}")))
    }

    fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> std::result::Result<T, ScorerError> {
        let response = self
            .client
            .post(self.url(path))
            .json(body)
            .send()
            .map_err(|e| ScorerError::Transport(e.to_string()))?;
        Self::decode(response)
    }

    pub fn health(&self) -> std::result::Result<Health, ScorerError> {
        let response = self
            .client
            .get(self.url("health"))
            .send()
            .map_err(|e| ScorerError::Transport(e.to_string()))?;
        Self::decode(response)
    }
}

impl Scorer for RemoteScorer {
    fn score_cloze(&self, instance: &ClozeInstance, candidates: &[String]) -> std::result::Result<Vec<f64>, ScorerError> {
        if !instance.is_masked() {
            return Err(ScorerError::Request("score_cloze needs a masked instance".into()));
        }
        let text = instance.render();
        let r: ScoreClozeResponse = self.post("score_cloze", &ScoreClozeRequest { text: &text, candidates })?;
        if r.probs.len() != candidates.len() {
            return Err(ScorerError::Protocol(format!(
                "{} probabilities for {} candidates",
                r.probs.len(),
                candidates.len()
            )));
        }
        let sum: f64 = r.probs.iter().sum();
        if r.probs.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > PROB_TOLERANCE {
            return Err(ScorerError::Protocol(format!("probabilities sum to {sum}")));
        }
        Ok(r.probs)
    }

    fn classify(&self, instance: &ClozeInstance) -> std::result::Result<ClassificationScore, ScorerError> {
        if instance.is_masked() {
            return Err(ScorerError::Request("classify needs a filled instance".into()));
        }
        let text = instance.render();
        let r: ClassifyResponse = self.post("classify", &ClassifyRequest { text: &text })?;
        if (r.c0 + r.c1 - 1.0).abs() > PROB_TOLERANCE {
            return Err(ScorerError::Protocol(format!("c0 + c1 = {}", r.c0 + r.c1)));
        }
        Ok(ClassificationScore { c0: r.c0, c1: r.c1 })
    }

    fn finetune(&mut self, instances: &[ClozeInstance], config: &FinetuneConfig) -> Result<FinetuneReport> {
        let instances = instances
            .iter()
            .map(|i| {
                Ok(FinetuneInstance {
                    text: i.render(),
                    label: i.label.ok_or_else(|| Error::Invalid("training instance without a label".into()))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let body = FinetuneRequest {
            instances,
            m_ratio: config.m.round() as u64,
            epochs: config.epochs,
        };
        let r: FinetuneResponse = self.post("finetune", &body)?;
        Ok(FinetuneReport {
            model_version: r.model_version,
            losses: Vec::new(),
        })
    }
}
