mod common;

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use common::*;
use gst_core::corpus::TextRecord;
use gst_core::embed::{mock_hash_embedding, store_write, EmbedderConfig, VectorStore};
use gst_core::llm::{CallKind, FnBackend, LlmError, LlmGateway, LlmProviderConfig, LlmRequest, MockFixture};
use gst_core::taxonomy::{
    annotate_samples, build_taxonomy, sample_corpus, Instruction, Provenance, TaxonomyError, TaxonomyOptions,
    DIRECTED_PROMPT_TEXTS,
};

fn instruction() -> Instruction {
    Instruction::new("Group the documents by subject.", "topic")
}

fn store_for(dir: &std::path::Path, records: &[TextRecord]) -> VectorStore {
    let ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
    let vs: Vec<_> = records.iter().map(|r| mock_hash_embedding(&r.text, 16)).collect();
    store_write(&dir.join("store"), &ids, &vs).unwrap()
}

fn fn_gateway<F>(f: F) -> LlmGateway
where
    F: Fn(&LlmRequest) -> Result<String, LlmError> + Send + Sync + 'static,
{
    LlmGateway::new(Box::new(FnBackend::new(f)), &LlmProviderConfig::mock()).unwrap()
}

fn options(k: usize) -> TaxonomyOptions {
    TaxonomyOptions {
        k,
        ..TaxonomyOptions::default()
    }
}

#[test]
fn fixture_taxonomy_recovers_the_topics() {
    let dir = tempfile::tempdir().unwrap();
    let records = topic_corpus(200, 4);
    let store = store_for(dir.path(), &records);
    let gw = LlmGateway::new(Box::new(MockFixture::new(topic_fixture(&records))), &LlmProviderConfig::mock()).unwrap();

    let tax = build_taxonomy(&instruction(), &records, &store, &EmbedderConfig::default(), &gw, &options(4), 3).unwrap();
    tax.validate().unwrap();
    assert_eq!(tax.provenance, Provenance::Clustered);
    let mut labels: Vec<&str> = tax.labels();
    labels.sort_unstable();
    assert_eq!(labels, ["Subject 0", "Subject 1", "Subject 2", "Subject 3"]);
    let topic: HashMap<&str, &str> = records.iter().map(|r| (r.id.as_str(), r.labels["topic"].as_str())).collect();
    for c in &tax.categories {
        assert_eq!(c.exemplar_ids.len(), 10);
        assert!(c.exemplar_ids.iter().all(|id| topic_label(topic[id.as_str()]) == c.label));
    }
    let ledger = gw.ledger();
    assert_eq!((ledger.summarize, ledger.generate_label, ledger.classify), (200, 4, 0));

    let sample = sample_corpus(&records, 200, 3).unwrap();
    let ann = annotate_samples(&tax, &sample, &store, &gw).unwrap();
    assert_eq!(ann.samples.len(), 200);
    assert_eq!(ann.drops.dropped(), 0);
    assert_eq!(gw.ledger().classify, 200);
    // every annotation agrees with the gold topic
    for rec in ann.records(&tax) {
        assert_eq!(rec.label, topic_label(topic[rec.text_id.as_str()]));
    }
    assert_eq!(ann.samples[0].embedding, store.get(&ann.samples[0].text_id).unwrap());
}

#[test]
fn no_summarize_clusters_stored_vectors() {
    let dir = tempfile::tempdir().unwrap();
    let records = topic_corpus(60, 3);
    let store = store_for(dir.path(), &records);
    let gw = LlmGateway::new(Box::new(MockFixture::new(topic_fixture(&records))), &LlmProviderConfig::mock()).unwrap();
    let opts = TaxonomyOptions {
        summarize: false,
        ..options(3)
    };
    let tax = build_taxonomy(&instruction(), &records, &store, &EmbedderConfig::default(), &gw, &opts, 3).unwrap();
    assert_eq!(tax.categories.len(), 3);
    assert_eq!(gw.ledger().summarize, 0);
    assert_eq!(gw.ledger().generate_label, 3);
}

#[test]
fn duplicate_labels_are_retried_then_suffixed() {
    let dir = tempfile::tempdir().unwrap();
    let records = topic_corpus(90, 3);
    let store = store_for(dir.path(), &records);
    let gw = fn_gateway(move |r| {
        Ok(match r.kind {
            CallKind::Summarize => format!("Summary: {}", r.prompt.lines().last().unwrap_or_default()),
            _ => "Category: Sports".into(),
        })
    });
    let opts = TaxonomyOptions {
        summarize: false,
        ..options(3)
    };
    let tax = build_taxonomy(&instruction(), &records, &store, &EmbedderConfig::default(), &gw, &opts, 5).unwrap();
    assert_eq!(tax.labels(), ["Sports", "Sports (variant 2)", "Sports (variant 3)"]);
    // one request per cluster plus one retry for each duplicate
    assert_eq!(gw.ledger().generate_label, 5);
}

#[test]
fn duplicate_retry_shows_the_taken_label_as_negative() {
    let dir = tempfile::tempdir().unwrap();
    let records = topic_corpus(40, 2);
    let store = store_for(dir.path(), &records);
    let calls = AtomicUsize::new(0);
    let gw = fn_gateway(move |r| match calls.fetch_add(1, Ordering::SeqCst) {
        0 | 1 => Ok("Category: sports ".into()),
        _ => {
            assert!(r.prompt.contains("\n- sports"), "{}", r.prompt);
            Ok("Category: Cooking".into())
        }
    });
    let opts = TaxonomyOptions {
        summarize: false,
        ..options(2)
    };
    let tax = build_taxonomy(&instruction(), &records, &store, &EmbedderConfig::default(), &gw, &opts, 5).unwrap();
    assert_eq!(tax.labels(), ["sports", "Cooking"]);
}

#[test]
fn directed_labels_come_from_one_prompt() {
    let dir = tempfile::tempdir().unwrap();
    let records = topic_corpus(150, 3);
    let store = store_for(dir.path(), &records);
    let gw = fn_gateway(move |r| {
        assert_eq!(r.kind, CallKind::GenerateLabel);
        assert_eq!(r.prompt.matches("about subject").count(), DIRECTED_PROMPT_TEXTS);
        Ok("Here you go:\n1. Sports\n2. Cooking\n3. SPORTS\n4. Finance".into())
    });
    let opts = TaxonomyOptions {
        directed_labels: true,
        ..options(3)
    };
    let tax = build_taxonomy(&instruction(), &records, &store, &EmbedderConfig::default(), &gw, &opts, 1).unwrap();
    assert_eq!(tax.provenance, Provenance::DirectedLlm);
    assert_eq!(tax.labels(), ["Sports", "Cooking", "SPORTS (variant 2)"]);
    assert!(tax.categories.iter().all(|c| c.centroid.is_none()));
    let ledger = gw.ledger();
    assert_eq!((ledger.summarize, ledger.generate_label, ledger.classify), (0, 1, 0));
}

#[test]
fn annotation_drops_unmatched_and_failed_texts() {
    let dir = tempfile::tempdir().unwrap();
    let records = topic_corpus(20, 2);
    let store = store_for(dir.path(), &records);
    let tax = {
        let gw = LlmGateway::new(Box::new(MockFixture::new(topic_fixture(&records))), &LlmProviderConfig::mock()).unwrap();
        build_taxonomy(&instruction(), &records, &store, &EmbedderConfig::default(), &gw, &options(2), 1).unwrap()
    };
    let gw = fn_gateway(|r| match r.key.as_str() {
        "d00000" | "d00001" => Ok("Classification: Astronomy".into()),
        "d00002" => Err(LlmError::Http {
            status: 400,
            body: "rejected".into(),
        }),
        // near-miss spelling still matches
        "d00003" => Ok("Classification: subject  O".into()),
        _ => Ok("Classification: \"Subject 1\".".into()),
    });
    let sample: Vec<&TextRecord> = records.iter().collect();
    let ann = annotate_samples(&tax, &sample, &store, &gw).unwrap();
    assert_eq!(ann.drops.unmatched, ["d00000", "d00001"]);
    assert_eq!(ann.drops.failed, ["d00002"]);
    assert_eq!(ann.samples.len(), 17);
    let by_id: HashMap<_, _> = ann.records(&tax).into_iter().map(|a| (a.text_id, a.label)).collect();
    assert_eq!(by_id["d00003"], "Subject 0");
    assert_eq!(by_id["d00004"], "Subject 1");
    // 20 first attempts, two retries of unmatched replies
    assert_eq!(gw.ledger().classify, 22);
}

#[test]
fn annotation_rejects_mostly_dropped_samples() {
    let dir = tempfile::tempdir().unwrap();
    let records = topic_corpus(20, 2);
    let store = store_for(dir.path(), &records);
    let gw = LlmGateway::new(Box::new(MockFixture::new(topic_fixture(&records))), &LlmProviderConfig::mock()).unwrap();
    let tax = build_taxonomy(&instruction(), &records, &store, &EmbedderConfig::default(), &gw, &options(2), 1).unwrap();
    let sample: Vec<&TextRecord> = records.iter().collect();

    let unsure = fn_gateway(|_| Ok("Classification: no idea".into()));
    let err = annotate_samples(&tax, &sample, &store, &unsure).unwrap_err();
    assert!(matches!(err, TaxonomyError::TooManyDropped { dropped: 20, total: 20 }), "{err:?}");

    let down = fn_gateway(|_| Err(LlmError::Http { status: 401, body: String::new() }));
    let err = annotate_samples(&tax, &sample, &store, &down).unwrap_err();
    assert!(matches!(err, TaxonomyError::AllClassificationsFailed(_)), "{err:?}");
}

#[test]
fn build_errors() {
    let dir = tempfile::tempdir().unwrap();
    let records = topic_corpus(10, 2);
    let store = store_for(dir.path(), &records);
    let emb = EmbedderConfig::default();
    let down = fn_gateway(|_| Err(LlmError::Http { status: 403, body: String::new() }));

    let err = build_taxonomy(&instruction(), &records, &store, &emb, &down, &options(2), 1).unwrap_err();
    assert!(matches!(err, TaxonomyError::AllSummariesFailed(_)), "{err:?}");
    let blank = Instruction::new("  ", "topic");
    let err = build_taxonomy(&blank, &records, &store, &emb, &down, &options(2), 1).unwrap_err();
    assert!(matches!(err, TaxonomyError::EmptyInstruction));
    let err = build_taxonomy(&instruction(), &records, &store, &emb, &down, &options(1), 1).unwrap_err();
    assert!(matches!(err, TaxonomyError::Options(_)));
    let err = build_taxonomy(&instruction(), &[], &store, &emb, &down, &options(2), 1).unwrap_err();
    assert!(matches!(err, TaxonomyError::EmptyCorpus));

    // identical summaries leave a single distinct point
    let same = fn_gateway(|_| Ok("Summary: everything".into()));
    let err = build_taxonomy(&instruction(), &records, &store, &emb, &same, &options(2), 1).unwrap_err();
    assert!(matches!(err, TaxonomyError::TooFewCategories(1)), "{err:?}");
}
