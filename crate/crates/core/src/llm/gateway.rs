use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tracing::{debug, warn};

use super::prompt::{self, CATEGORY_MARKER, CLASSIFICATION_MARKER, SUMMARY_MARKER};
use super::{backend_from_config, CallKind, ChatBackend, LlmCallLedger, LlmError, LlmProviderConfig};

/// What a reply must contain to count as a success.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplyFormat {
    /// A line starting with the marker; the payload is what follows it.
    Marker(&'static str),
    /// A numbered list with at least this many items; the payload is the raw reply.
    NumberedList { min_items: usize },
}

impl ReplyFormat {
    fn extract(&self, reply: &str) -> Result<String, LlmError> {
        match *self {
            Self::Marker(marker) => prompt::parse_marker(reply, marker),
            Self::NumberedList { min_items } => {
                if prompt::parse_numbered_list(reply).len() >= min_items {
                    Ok(reply.to_string())
                } else {
                    Err(LlmError::ParseFailure {
                        marker: format!("numbered list of >= {min_items} items"),
                        raw: reply.to_string(),
                    })
                }
            }
        }
    }
}

/// A rendered prompt plus the identifiers a fixture backend resolves it by.
#[derive(Debug, Clone, PartialEq)]
pub struct LlmRequest {
    pub kind: CallKind,
    /// Text id, or `cluster:<index>` for label generation.
    pub key: String,
    /// Secondary lookup key for fixtures (the anchor text id of a cluster).
    pub alt_key: Option<String>,
    pub prompt: String,
    pub format: ReplyFormat,
}

pub struct LlmGateway {
    backend: Box<dyn ChatBackend>,
    max_in_flight: usize,
    max_retries: u32,
    backoff_base: Duration,
    jitter_seed: u64,
    ledger: Mutex<LlmCallLedger>,
}

impl std::fmt::Debug for LlmGateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LlmGateway")
            .field("max_in_flight", &self.max_in_flight)
            .field("max_retries", &self.max_retries)
            .field("ledger", &self.ledger())
            .finish_non_exhaustive()
    }
}

impl LlmGateway {
    pub fn new(backend: Box<dyn ChatBackend>, config: &LlmProviderConfig) -> Result<Self, LlmError> {
        config.validate()?;
        Ok(Self {
            backend,
            max_in_flight: config.max_in_flight,
            max_retries: config.max_retries,
            backoff_base: Duration::from_millis(config.backoff_base_ms),
            jitter_seed: 0,
            ledger: Mutex::new(LlmCallLedger::default()),
        })
    }

    pub fn from_config(config: &LlmProviderConfig) -> Result<Self, LlmError> {
        Self::new(backend_from_config(config)?, config)
    }

    /// Seeds the backoff jitter.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.jitter_seed = seed;
        self
    }

    pub fn ledger(&self) -> LlmCallLedger {
        *self.ledger.lock().expect("ledger lock")
    }

    pub fn max_retries(&self) -> u32 {
        self.max_retries
    }

    fn backoff(&self, key: &str, attempt: u32) -> Duration {
        if self.backoff_base.is_zero() {
            return Duration::ZERO;
        }
        let mut h = self.jitter_seed ^ 0xcbf2_9ce4_8422_2325;
        for b in key.bytes() {
            h = (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(h ^ u64::from(attempt));
        let factor = 2f64.powi(attempt as i32 - 1) * (1.0 + rng.gen_range(0.0..0.5));
        self.backoff_base.mul_f64(factor)
    }

    /// Runs one request to completion, retrying transient and parse failures.
    pub fn execute(&self, request: &LlmRequest) -> Result<String, LlmError> {
        let mut last_err = None;
        for attempt in 0..=self.max_retries {
            if attempt > 0 {
                thread::sleep(self.backoff(&request.key, attempt));
            }
            self.ledger.lock().expect("ledger lock").record(request.kind, attempt);
            let outcome = self
                .backend
                .complete(request)
                .and_then(|reply| request.format.extract(&reply));
            match outcome {
                Ok(payload) => return Ok(payload),
                Err(e) if e.is_retryable() => {
                    debug!(kind = %request.kind, key = %request.key, attempt, error = %e, "retrying");
                    last_err = Some(e);
                }
                Err(e) => return Err(e),
            }
        }
        Err(last_err.expect("at least one attempt"))
    }

    /// Executes all requests with at most `max_in_flight` outstanding.
    ///
    /// Results are returned in request order; a failure only occupies its own
    /// slot.
    pub fn batch_execute(&self, requests: &[LlmRequest]) -> Vec<Result<String, LlmError>> {
        let slots: Vec<Mutex<Option<Result<String, LlmError>>>> =
            requests.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let workers = self.max_in_flight.min(requests.len());
        thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(req) = requests.get(i) else { break };
                    let result = self.execute(req);
                    *slots[i].lock().expect("slot lock") = Some(result);
                });
            }
        });
        slots
            .into_iter()
            .map(|m| m.into_inner().expect("slot lock").expect("every slot filled"))
            .collect()
    }

    pub fn summarize_request(key: &str, instruction: &str, text: &str) -> LlmRequest {
        LlmRequest {
            kind: CallKind::Summarize,
            key: key.to_string(),
            alt_key: None,
            prompt: prompt::render_summarize(instruction, text),
            format: ReplyFormat::Marker(SUMMARY_MARKER),
        }
    }

    pub fn label_request<S: AsRef<str>>(
        key: &str,
        alt_key: Option<&str>,
        instruction: &str,
        positives: &[S],
        negatives: &[S],
    ) -> LlmRequest {
        LlmRequest {
            kind: CallKind::GenerateLabel,
            key: key.to_string(),
            alt_key: alt_key.map(str::to_string),
            prompt: prompt::render_generate_label(instruction, positives, negatives),
            format: ReplyFormat::Marker(CATEGORY_MARKER),
        }
    }

    pub fn classify_request<S: AsRef<str>>(
        key: &str,
        instruction: &str,
        categories: &[S],
        text: &str,
    ) -> LlmRequest {
        LlmRequest {
            kind: CallKind::Classify,
            key: key.to_string(),
            alt_key: None,
            prompt: prompt::render_classify(instruction, categories, text),
            format: ReplyFormat::Marker(CLASSIFICATION_MARKER),
        }
    }

    pub fn summarize(&self, key: &str, instruction: &str, text: &str) -> Result<String, LlmError> {
        check_non_empty(&[instruction, text])?;
        let summary = self.execute(&Self::summarize_request(key, instruction, text))?;
        log_long(CallKind::Summarize, &summary, 10);
        Ok(summary)
    }

    /// Summaries for `(key, text)` items, in input order.
    pub fn summarize_batch(
        &self,
        instruction: &str,
        items: &[(&str, &str)],
    ) -> Vec<Result<String, LlmError>> {
        let requests: Vec<_> = items
            .iter()
            .map(|(k, t)| Self::summarize_request(k, instruction, t))
            .collect();
        let results = self.batch_execute(&requests);
        for s in results.iter().flatten() {
            log_long(CallKind::Summarize, s, 10);
        }
        results
    }

    pub fn generate_label<S: AsRef<str>>(
        &self,
        key: &str,
        alt_key: Option<&str>,
        instruction: &str,
        positives: &[S],
        negatives: &[S],
    ) -> Result<String, LlmError> {
        if positives.is_empty() {
            return Err(LlmError::InvalidRequest("label generation needs >= 1 positive text".into()));
        }
        let label = self.execute(&Self::label_request(key, alt_key, instruction, positives, negatives))?;
        log_long(CallKind::GenerateLabel, &label, 5);
        Ok(label)
    }

    /// Raw classification string; matching it to a category is the caller's job.
    pub fn classify<S: AsRef<str>>(
        &self,
        key: &str,
        instruction: &str,
        categories: &[S],
        text: &str,
    ) -> Result<String, LlmError> {
        check_classify(categories, text)?;
        self.execute(&Self::classify_request(key, instruction, categories, text))
    }

    pub fn classify_batch<S: AsRef<str>>(
        &self,
        instruction: &str,
        categories: &[S],
        items: &[(&str, &str)],
    ) -> Vec<Result<String, LlmError>> {
        let requests: Vec<_> = items
            .iter()
            .map(|(k, t)| Self::classify_request(k, instruction, categories, t))
            .collect();
        self.batch_execute(&requests)
    }

    /// One prompt asking directly for `k` labels; returns the parsed list.
    pub fn directed_labels<S: AsRef<str>>(
        &self,
        instruction: &str,
        texts: &[S],
        k: usize,
    ) -> Result<Vec<String>, LlmError> {
        let request = LlmRequest {
            kind: CallKind::GenerateLabel,
            key: "directed".into(),
            alt_key: None,
            prompt: prompt::render_directed(instruction, texts, k),
            format: ReplyFormat::NumberedList { min_items: 1 },
        };
        let raw = self.execute(&request)?;
        let labels = prompt::parse_numbered_list(&raw);
        for l in &labels {
            log_long(CallKind::GenerateLabel, l, 5);
        }
        Ok(labels)
    }
}

fn check_non_empty(parts: &[&str]) -> Result<(), LlmError> {
    if parts.iter().any(|p| p.trim().is_empty()) {
        return Err(LlmError::InvalidRequest("instruction and text must be non-empty".into()));
    }
    Ok(())
}

fn check_classify<S: AsRef<str>>(categories: &[S], text: &str) -> Result<(), LlmError> {
    if categories.len() < 2 {
        return Err(LlmError::InvalidRequest("classification needs >= 2 categories".into()));
    }
    check_non_empty(&[text])
}

fn log_long(kind: CallKind, payload: &str, limit: usize) {
    let words = prompt::word_count(payload);
    if words > limit {
        warn!(%kind, words, limit, payload, "reply longer than requested");
    }
}
