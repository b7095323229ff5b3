//! Generic embeddings: producing them and persisting them once.

pub mod store;

use std::collections::HashSet;
use std::thread;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::http::{self, HttpFailure};
use crate::vectorlab::EmbeddingVector;

pub use store::{store_read, store_write, StoreError, StoreWriter, VectorStore};

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("no texts to embed")]
    Empty,
    #[error("duplicate text id {0:?}")]
    DuplicateId(String),
    #[error("missing embedding for {0:?}")]
    MissingEmbedding(String),
    #[error("embedding dimension drifted from {expected} to {found}")]
    DimDrift { expected: usize, found: usize },
    #[error("embedding provider failed: {0}")]
    Provider(String),
    #[error("invalid embedder configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedBackend {
    RemoteApi,
    StoreOnly,
    MockHash,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderConfig {
    pub backend: EmbedBackend,
    pub endpoint_url: String,
    pub model_name: String,
    pub api_key_env: String,
    pub batch_size: usize,
    /// Output dimension of the `mock_hash` backend.
    pub mock_dim: usize,
    pub max_retries: u32,
    pub request_timeout_secs: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            backend: EmbedBackend::MockHash,
            endpoint_url: "https://api.openai.com/v1/embeddings".into(),
            model_name: "mock-hash".into(),
            api_key_env: "GST_EMBED_API_KEY".into(),
            batch_size: 64,
            mock_dim: 64,
            max_retries: 3,
            request_timeout_secs: 60,
        }
    }
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<(), EmbedError> {
        if self.batch_size == 0 {
            return Err(EmbedError::Config("batch_size must be >= 1".into()));
        }
        if self.backend == EmbedBackend::MockHash && self.mock_dim == 0 {
            return Err(EmbedError::Config("mock_dim must be >= 1".into()));
        }
        Ok(())
    }
}

/// Deterministic pseudo-embedding: the SHA-256 of the text seeds a ChaCha
/// stream that fills `dim` values in `[-1, 1)`. Equal texts give equal vectors.
pub fn mock_hash_embedding(text: &str, dim: usize) -> EmbeddingVector {
    let digest = Sha256::digest(text.as_bytes());
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(seed);
    let values = (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    EmbeddingVector::new(values).expect("finite, non-empty")
}

#[derive(Debug, Serialize)]
struct EmbedRequest<'a> {
    model: &'a str,
    input: Vec<&'a str>,
}

#[derive(Debug, Deserialize)]
struct EmbedResponse {
    data: Vec<EmbedDatum>,
}

#[derive(Debug, Deserialize)]
struct EmbedDatum {
    embedding: Vec<f32>,
    #[serde(default)]
    index: Option<usize>,
}

fn remote_batch(
    agent: &ureq::Agent,
    cfg: &EmbedderConfig,
    key: Option<&str>,
    texts: &[&str],
) -> Result<Vec<EmbeddingVector>, EmbedError> {
    let body = EmbedRequest {
        model: &cfg.model_name,
        input: texts.to_vec(),
    };
    let mut last = String::new();
    for attempt in 0..=cfg.max_retries {
        if attempt > 0 {
            thread::sleep(Duration::from_millis(500) * 2u32.pow(attempt - 1));
        }
        match http::post_json::<_, EmbedResponse>(agent, &cfg.endpoint_url, key, &body) {
            Ok(mut resp) => {
                if resp.data.len() != texts.len() {
                    return Err(EmbedError::Provider(format!(
                        "{} inputs but {} embeddings",
                        texts.len(),
                        resp.data.len()
                    )));
                }
                if resp.data.iter().all(|d| d.index.is_some()) {
                    resp.data.sort_by_key(|d| d.index);
                }
                return resp
                    .data
                    .into_iter()
                    .map(|d| {
                        EmbeddingVector::new(d.embedding)
                            .map_err(|e| EmbedError::Provider(format!("bad vector: {e}")))
                    })
                    .collect();
            }
            Err(HttpFailure::Status { status, body }) if status != 429 && status < 500 => {
                return Err(EmbedError::Provider(format!("HTTP {status}: {body}")));
            }
            Err(HttpFailure::Status { status, body }) => last = format!("HTTP {status}: {body}"),
            Err(HttpFailure::Transport(m)) | Err(HttpFailure::Decode(m)) => last = m,
        }
    }
    Err(EmbedError::Provider(last))
}

/// Embeds `(id, text)` pairs in order.
///
/// The outer error covers contract violations that invalidate the whole call
/// (empty input, duplicate ids, dimension drift); provider failures land in
/// the slot of each affected item.
pub fn embed_texts(
    cfg: &EmbedderConfig,
    store: Option<&VectorStore>,
    texts: &[(&str, &str)],
) -> Result<Vec<Result<EmbeddingVector, EmbedError>>, EmbedError> {
    cfg.validate()?;
    if texts.is_empty() {
        return Err(EmbedError::Empty);
    }
    let mut seen = HashSet::with_capacity(texts.len());
    for (id, _) in texts {
        if !seen.insert(*id) {
            return Err(EmbedError::DuplicateId((*id).to_string()));
        }
    }

    let out: Vec<Result<EmbeddingVector, EmbedError>> = match cfg.backend {
        EmbedBackend::MockHash => texts
            .iter()
            .map(|(_, t)| Ok(mock_hash_embedding(t, cfg.mock_dim)))
            .collect(),
        EmbedBackend::StoreOnly => {
            let store = store.ok_or_else(|| EmbedError::Config("store_only backend needs a store".into()))?;
            texts
                .iter()
                .map(|(id, _)| {
                    if store.contains(id) {
                        store.get(id).map_err(EmbedError::from)
                    } else {
                        Err(EmbedError::MissingEmbedding((*id).to_string()))
                    }
                })
                .collect()
        }
        EmbedBackend::RemoteApi => {
            let agent = http::agent(Duration::from_secs(cfg.request_timeout_secs));
            let key = std::env::var(&cfg.api_key_env).ok().filter(|k| !k.is_empty());
            let mut out = Vec::with_capacity(texts.len());
            for batch in texts.chunks(cfg.batch_size) {
                let strs: Vec<&str> = batch.iter().map(|(_, t)| *t).collect();
                match remote_batch(&agent, cfg, key.as_deref(), &strs) {
                    Ok(vs) => out.extend(vs.into_iter().map(Ok)),
                    Err(e) => {
                        let msg = e.to_string();
                        out.extend(batch.iter().map(|_| Err(EmbedError::Provider(msg.clone()))));
                    }
                }
            }
            out
        }
    };

    let mut dim = None;
    for v in out.iter().flatten() {
        match dim {
            None => dim = Some(v.dim()),
            Some(d) if d != v.dim() => {
                return Err(EmbedError::DimDrift {
                    expected: d,
                    found: v.dim(),
                })
            }
            _ => {}
        }
    }
    Ok(out)
}

/// Like [`embed_texts`] but fails on the first per-item error.
pub fn embed_all(
    cfg: &EmbedderConfig,
    store: Option<&VectorStore>,
    texts: &[(&str, &str)],
) -> Result<Vec<EmbeddingVector>, EmbedError> {
    embed_texts(cfg, store, texts)?.into_iter().collect()
}
