//! Deterministic backends for tests and offline runs.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{CallKind, ChatBackend, LlmError, LlmRequest};

/// One line of a fixture file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureEntry {
    pub kind: CallKind,
    pub key: String,
    pub response: String,
}

/// Canned replies keyed by `(kind, key)`.
///
/// Several entries under one key form a script: the n-th physical request for
/// that key gets the n-th entry, and the last entry repeats. A request whose
/// key (and alternate key) has no entry fails with
/// [`LlmError::MissingFixture`].
#[derive(Debug, Default)]
pub struct MockFixture {
    responses: HashMap<(CallKind, String), Vec<String>>,
    served: Mutex<HashMap<(CallKind, String), usize>>,
}

impl MockFixture {
    pub fn new(entries: impl IntoIterator<Item = FixtureEntry>) -> Self {
        let mut responses: HashMap<_, Vec<String>> = HashMap::new();
        for e in entries {
            responses.entry((e.kind, e.key)).or_default().push(e.response);
        }
        Self {
            responses,
            served: Mutex::new(HashMap::new()),
        }
    }

    pub fn load(path: &Path) -> Result<Self, LlmError> {
        let entries: Vec<FixtureEntry> = crate::corpus::read_jsonl(path)
            .map_err(|e| LlmError::Fixture(e.to_string()))?;
        Ok(Self::new(entries))
    }

    pub fn len(&self) -> usize {
        self.responses.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    fn resolve(&self, kind: CallKind, key: &str) -> Option<String> {
        let id = (kind, key.to_string());
        let script = self.responses.get(&id)?;
        let mut served = self.served.lock().expect("fixture lock");
        let n = served.entry(id).or_default();
        let reply = script[(*n).min(script.len() - 1)].clone();
        *n += 1;
        Some(reply)
    }
}

impl ChatBackend for MockFixture {
    fn complete(&self, request: &LlmRequest) -> Result<String, LlmError> {
        self.resolve(request.kind, &request.key)
            .or_else(|| {
                let alt = request.alt_key.as_deref()?;
                self.resolve(request.kind, alt)
            })
            .ok_or_else(|| LlmError::MissingFixture {
                kind: request.kind,
                key: request.key.clone(),
            })
    }
}

/// Backend driven by a closure; lets tests script replies from the prompt.
pub struct FnBackend<F>(F);

impl<F> FnBackend<F>
where
    F: Fn(&LlmRequest) -> Result<String, LlmError> + Send + Sync,
{
    pub fn new(f: F) -> Self {
        Self(f)
    }
}

impl<F> ChatBackend for FnBackend<F>
where
    F: Fn(&LlmRequest) -> Result<String, LlmError> + Send + Sync,
{
    fn complete(&self, request: &LlmRequest) -> Result<String, LlmError> {
        (self.0)(request)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{LlmGateway, LlmProviderConfig};

    fn entry(kind: CallKind, key: &str, response: &str) -> FixtureEntry {
        FixtureEntry {
            kind,
            key: key.into(),
            response: response.into(),
        }
    }

    #[test]
    fn scripted_responses_then_repeat_last() {
        let fx = MockFixture::new([
            entry(CallKind::Summarize, "t1", "nope"),
            entry(CallKind::Summarize, "t1", "Summary: second"),
        ]);
        let req = LlmGateway::summarize_request("t1", "i", "x");
        assert_eq!(fx.complete(&req).unwrap(), "nope");
        assert_eq!(fx.complete(&req).unwrap(), "Summary: second");
        assert_eq!(fx.complete(&req).unwrap(), "Summary: second");
    }

    #[test]
    fn missing_key_is_a_hard_error() {
        let fx = MockFixture::new([entry(CallKind::Classify, "t1", "Classification: a")]);
        let req = LlmGateway::summarize_request("t1", "i", "x");
        assert_eq!(
            fx.complete(&req),
            Err(LlmError::MissingFixture { kind: CallKind::Summarize, key: "t1".into() })
        );
        // and the gateway does not retry it
        let gw = LlmGateway::new(Box::new(fx), &LlmProviderConfig::mock()).unwrap();
        assert!(gw.execute(&req).is_err());
        assert_eq!(gw.ledger().summarize, 1);
    }

    #[test]
    fn alternate_key_lookup() {
        let fx = MockFixture::new([entry(CallKind::GenerateLabel, "doc-9", "Category: Sports")]);
        let req = LlmGateway::label_request("cluster:0", Some("doc-9"), "i", &["p"], &["n"]);
        assert_eq!(fx.complete(&req).unwrap(), "Category: Sports");
    }

    #[test]
    fn fixture_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fx.jsonl");
        std::fs::write(
            &path,
            "{\"kind\":\"summarize\",\"key\":\"a\",\"response\":\"Summary: x\"}\n\
             {\"kind\":\"classify\",\"key\":\"a\",\"response\":\"Classification: y\"}\n",
        )
        .unwrap();
        let fx = MockFixture::load(&path).unwrap();
        assert_eq!(fx.len(), 2);
        std::fs::write(&path, "{\"kind\":\"bogus\",\"key\":\"a\",\"response\":\"\"}\n").unwrap();
        assert!(matches!(MockFixture::load(&path), Err(LlmError::Fixture(_))));
    }
}
