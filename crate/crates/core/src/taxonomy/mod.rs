//! Instruction-specific label taxonomies: sampling, summarization, clustering,
//! contrastive label generation, and classification of the sample.

pub mod kmeans;
pub mod matcher;

use std::collections::HashSet;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{info, warn};

use crate::corpus::TextRecord;
use crate::embed::{self, EmbedError, EmbedderConfig, StoreError, VectorStore};
use crate::llm::{LlmError, LlmGateway};
use crate::vectorlab::{squared_euclidean, EmbeddingVector};

pub use kmeans::{kmeans_pp, ClusteringResult, KMeansError, DEFAULT_MAX_ITERS};
pub use matcher::{match_category, normalize_label};

/// How many sampled texts the directed-label prompt shows.
pub const DIRECTED_PROMPT_TEXTS: usize = 100;

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("instruction text is empty")]
    EmptyInstruction,
    #[error("invalid taxonomy options: {0}")]
    Options(String),
    #[error("every summarization request failed (first error: {0})")]
    AllSummariesFailed(LlmError),
    #[error("taxonomy has {0} categories, need at least 2")]
    TooFewCategories(usize),
    #[error("{dropped} of {total} samples could not be classified")]
    TooManyDropped { dropped: usize, total: usize },
    #[error("every classification request failed (first error: {0})")]
    AllClassificationsFailed(LlmError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    KMeans(#[from] KMeansError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    #[serde(rename = "instruction")]
    pub text: String,
    pub aspect_name: String,
}

impl Instruction {
    pub fn new(text: impl Into<String>, aspect_name: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            aspect_name: aspect_name.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Clustered,
    DirectedLlm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub index: usize,
    pub label: String,
    /// Texts nearest the cluster centroid that were shown as positives.
    pub exemplar_ids: Vec<String>,
    /// Cluster centroid in the clustering space; absent for directed labels.
    pub centroid: Option<EmbeddingVector>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaxonomyOptions {
    pub sample_size: usize,
    pub k: usize,
    pub summarize: bool,
    pub directed_labels: bool,
    pub positives_per_prompt: usize,
    pub negatives_per_prompt: usize,
    pub max_iters: usize,
}

impl Default for TaxonomyOptions {
    fn default() -> Self {
        Self {
            sample_size: 3000,
            k: 50,
            summarize: true,
            directed_labels: false,
            positives_per_prompt: 10,
            negatives_per_prompt: 10,
            max_iters: DEFAULT_MAX_ITERS,
        }
    }
}

impl TaxonomyOptions {
    pub fn validate(&self) -> Result<(), TaxonomyError> {
        let bad = |m: &str| Err(TaxonomyError::Options(m.into()));
        if self.sample_size == 0 {
            return bad("sample_size must be >= 1");
        }
        if self.k < 2 {
            return bad("k must be >= 2");
        }
        if self.positives_per_prompt == 0 {
            return bad("positives_per_prompt must be >= 1");
        }
        if self.max_iters == 0 {
            return bad("max_iters must be >= 1");
        }
        Ok(())
    }
}

/// The taxonomy file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelTaxonomy {
    #[serde(flatten)]
    pub instruction: Instruction,
    pub provenance: Provenance,
    /// Number of categories.
    pub k: usize,
    pub categories: Vec<Category>,
    pub sampled_ids: Vec<String>,
    pub seed: u64,
    pub options: TaxonomyOptions,
}

impl LabelTaxonomy {
    pub fn labels(&self) -> Vec<&str> {
        self.categories.iter().map(|c| c.label.as_str()).collect()
    }

    /// Checks the invariants every consumer relies on.
    pub fn validate(&self) -> Result<(), TaxonomyError> {
        if self.categories.len() < 2 {
            return Err(TaxonomyError::TooFewCategories(self.categories.len()));
        }
        let mut seen = HashSet::new();
        for (i, c) in self.categories.iter().enumerate() {
            if c.index != i {
                return Err(TaxonomyError::Options(format!("category {i} has index {}", c.index)));
            }
            if !seen.insert(normalize_label(&c.label)) {
                return Err(TaxonomyError::Options(format!("duplicate label {:?}", c.label)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedSample {
    pub text_id: String,
    /// Generic embedding of the original text.
    pub embedding: EmbeddingVector,
    pub label_index: usize,
}

/// One line of the annotations file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub text_id: String,
    pub label_index: usize,
    pub label: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropReport {
    pub total: usize,
    /// Replies that matched no category, even after one retry.
    pub unmatched: Vec<String>,
    /// Requests that failed at the provider.
    pub failed: Vec<String>,
}

impl DropReport {
    pub fn dropped(&self) -> usize {
        self.unmatched.len() + self.failed.len()
    }
}

#[derive(Debug, Clone)]
pub struct Annotation {
    pub samples: Vec<AnnotatedSample>,
    pub drops: DropReport,
}

impl Annotation {
    pub fn records(&self, taxonomy: &LabelTaxonomy) -> Vec<AnnotationRecord> {
        self.samples
            .iter()
            .map(|s| AnnotationRecord {
                text_id: s.text_id.clone(),
                label_index: s.label_index,
                label: taxonomy.categories[s.label_index].label.clone(),
            })
            .collect()
    }
}

/// Uniform sample without replacement, returned in corpus order.
pub fn sample_corpus<'a>(
    corpus: &'a [TextRecord],
    sample_size: usize,
    seed: u64,
) -> Result<Vec<&'a TextRecord>, TaxonomyError> {
    if corpus.is_empty() {
        return Err(TaxonomyError::EmptyCorpus);
    }
    if sample_size >= corpus.len() {
        if sample_size > corpus.len() {
            warn!(sample_size, corpus = corpus.len(), "sample size exceeds corpus; using all texts");
        }
        return Ok(corpus.iter().collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, corpus.len(), sample_size).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| &corpus[i]).collect())
}

/// Indices of `members` sorted by distance to `centroid`, nearest first,
/// ties by position.
fn by_distance(
    members: &[usize],
    points: &[EmbeddingVector],
    centroid: &EmbeddingVector,
) -> Result<Vec<usize>, TaxonomyError> {
    let mut d = members
        .iter()
        .map(|&i| Ok((i, squared_euclidean(&points[i], centroid).map_err(KMeansError::from)?)))
        .collect::<Result<Vec<_>, TaxonomyError>>()?;
    d.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    Ok(d.into_iter().map(|(i, _)| i).collect())
}

/// Takes up to `n` items round-robin across `groups`.
fn round_robin(groups: &[&[usize]], n: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(n);
    let mut depth = 0;
    while out.len() < n {
        let before = out.len();
        for g in groups {
            if let Some(&i) = g.get(depth) {
                out.push(i);
                if out.len() == n {
                    break;
                }
            }
        }
        if out.len() == before {
            break;
        }
        depth += 1;
    }
    out
}

/// Builds a clustered label taxonomy.
///
/// The sample is optionally summarized per the instruction, the summaries
/// (or originals) embedded and clustered, and each cluster labelled from its
/// most central texts contrasted with texts of the other clusters.
pub fn build_taxonomy(
    instruction: &Instruction,
    corpus: &[TextRecord],
    store: &VectorStore,
    embedder: &EmbedderConfig,
    gateway: &LlmGateway,
    options: &TaxonomyOptions,
    seed: u64,
) -> Result<LabelTaxonomy, TaxonomyError> {
    options.validate()?;
    if instruction.text.trim().is_empty() {
        return Err(TaxonomyError::EmptyInstruction);
    }
    let sample = sample_corpus(corpus, options.sample_size, seed)?;
    if options.directed_labels {
        return directed_label_generation(instruction, &sample, gateway, options, seed);
    }

    // texts that take part in clustering, and their clustering-space vectors
    let (members, points): (Vec<&TextRecord>, Vec<EmbeddingVector>) = if options.summarize {
        let items: Vec<(&str, &str)> = sample.iter().map(|r| (r.id.as_str(), r.text.as_str())).collect();
        let replies = gateway.summarize_batch(&instruction.text, &items);
        let mut kept = Vec::new();
        let mut summaries = Vec::new();
        let mut first_err = None;
        for (rec, reply) in sample.iter().zip(replies) {
            match reply {
                Ok(s) => {
                    kept.push(*rec);
                    summaries.push(s);
                }
                Err(e) => {
                    warn!(id = %rec.id, error = %e, "summarization failed; text skipped");
                    first_err.get_or_insert(e);
                }
            }
        }
        if kept.is_empty() {
            return Err(TaxonomyError::AllSummariesFailed(first_err.expect("non-empty sample")));
        }
        let keys: Vec<String> = kept.iter().map(|r| format!("summary:{}", r.id)).collect();
        let texts: Vec<(&str, &str)> = keys.iter().map(String::as_str).zip(summaries.iter().map(String::as_str)).collect();
        let vectors = embed::embed_all(embedder, Some(store), &texts)?;
        (kept, vectors)
    } else {
        let ids: Vec<String> = sample.iter().map(|r| r.id.clone()).collect();
        (sample.clone(), store.read(Some(&ids))?)
    };

    let distinct = points
        .iter()
        .map(|p| p.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>())
        .collect::<HashSet<_>>()
        .len();
    let k = options.k.min(distinct);
    if k < options.k {
        info!(requested = options.k, k, "fewer distinct clustering vectors than k; reducing k");
    }
    if k < 2 {
        return Err(TaxonomyError::TooFewCategories(k));
    }
    let clustering = kmeans_pp(&points, k, seed, options.max_iters)?;

    let mut ranked = Vec::with_capacity(k);
    for c in 0..k {
        ranked.push(by_distance(&clustering.members(c), &points, &clustering.centroids[c])?);
    }
    let nonempty: Vec<usize> = (0..k).filter(|&c| !ranked[c].is_empty()).collect();

    struct Prompt {
        cluster: usize,
        anchor: String,
        positives: Vec<usize>,
        negatives: Vec<String>,
    }
    let prompts: Vec<Prompt> = nonempty
        .iter()
        .map(|&c| {
            let positives: Vec<usize> = ranked[c].iter().copied().take(options.positives_per_prompt).collect();
            let others: Vec<&[usize]> = nonempty
                .iter()
                .filter(|&&o| o != c)
                .map(|&o| ranked[o].as_slice())
                .collect();
            let negatives = round_robin(&others, options.negatives_per_prompt)
                .into_iter()
                .map(|i| members[i].text.clone())
                .collect();
            Prompt {
                cluster: c,
                anchor: members[positives[0]].id.clone(),
                positives,
                negatives,
            }
        })
        .collect();

    let requests: Vec<_> = prompts
        .iter()
        .map(|p| {
            let pos: Vec<&str> = p.positives.iter().map(|&i| members[i].text.as_str()).collect();
            let neg: Vec<&str> = p.negatives.iter().map(String::as_str).collect();
            LlmGateway::label_request(&format!("cluster:{}", p.cluster), Some(&p.anchor), &instruction.text, &pos, &neg)
        })
        .collect();
    let replies = gateway.batch_execute(&requests);

    let mut seen: HashSet<String> = HashSet::new();
    let mut categories = Vec::new();
    for (p, reply) in prompts.iter().zip(replies) {
        let mut label = match reply {
            Ok(l) => l,
            Err(e) => {
                warn!(cluster = p.cluster, error = %e, "label generation failed; cluster dropped");
                continue;
            }
        };
        if seen.contains(&normalize_label(&label)) {
            let pos: Vec<&str> = p.positives.iter().map(|&i| members[i].text.as_str()).collect();
            let mut neg: Vec<&str> = p.negatives.iter().map(String::as_str).collect();
            neg.push(&label);
            let retry = gateway.generate_label(
                &format!("cluster:{}", p.cluster),
                Some(&p.anchor),
                &instruction.text,
                &pos,
                &neg,
            );
            label = match retry {
                Ok(l) if !seen.contains(&normalize_label(&l)) => l,
                Ok(_) => matcher::variant_label(&label, &|n| seen.contains(n)),
                Err(e) => {
                    warn!(cluster = p.cluster, error = %e, "label retry failed");
                    matcher::variant_label(&label, &|n| seen.contains(n))
                }
            };
        }
        seen.insert(normalize_label(&label));
        categories.push(Category {
            index: categories.len(),
            label,
            exemplar_ids: p.positives.iter().map(|&i| members[i].id.clone()).collect(),
            centroid: Some(clustering.centroids[p.cluster].clone()),
        });
    }
    if categories.len() < 2 {
        return Err(TaxonomyError::TooFewCategories(categories.len()));
    }
    Ok(LabelTaxonomy {
        instruction: instruction.clone(),
        provenance: Provenance::Clustered,
        k: categories.len(),
        categories,
        sampled_ids: sample.iter().map(|r| r.id.clone()).collect(),
        seed,
        options: options.clone(),
    })
}

/// Ablation baseline: one prompt asks the LLM for `k` labels directly.
pub fn directed_label_generation(
    instruction: &Instruction,
    sample: &[&TextRecord],
    gateway: &LlmGateway,
    options: &TaxonomyOptions,
    seed: u64,
) -> Result<LabelTaxonomy, TaxonomyError> {
    let shown: Vec<&str> = sample
        .iter()
        .take(DIRECTED_PROMPT_TEXTS)
        .map(|r| r.text.as_str())
        .collect();
    let mut labels = gateway.directed_labels(&instruction.text, &shown, options.k)?;
    labels.truncate(options.k);
    if labels.len() < 2 {
        return Err(TaxonomyError::TooFewCategories(labels.len()));
    }
    let categories = matcher::dedupe_with_variants(labels)
        .into_iter()
        .enumerate()
        .map(|(index, label)| Category {
            index,
            label,
            exemplar_ids: Vec::new(),
            centroid: None,
        })
        .collect::<Vec<_>>();
    Ok(LabelTaxonomy {
        instruction: instruction.clone(),
        provenance: Provenance::DirectedLlm,
        k: categories.len(),
        categories,
        sampled_ids: sample.iter().map(|r| r.id.clone()).collect(),
        seed,
        options: options.clone(),
    })
}

/// Classifies each original sampled text into the taxonomy.
///
/// Unmatched replies get one retry; texts still unmatched (or whose requests
/// fail) are dropped and reported. Dropping more than half is an error.
pub fn annotate_samples(
    taxonomy: &LabelTaxonomy,
    sample: &[&TextRecord],
    store: &VectorStore,
    gateway: &LlmGateway,
) -> Result<Annotation, TaxonomyError> {
    taxonomy.validate()?;
    if sample.is_empty() {
        return Err(TaxonomyError::EmptyCorpus);
    }
    let labels = taxonomy.labels();
    let instruction = &taxonomy.instruction.text;
    let items: Vec<(&str, &str)> = sample.iter().map(|r| (r.id.as_str(), r.text.as_str())).collect();

    let mut outcome: Vec<Option<usize>> = vec![None; sample.len()];
    let mut failed = vec![false; sample.len()];
    let mut first_err = None;
    let mut retry = Vec::new();
    for (i, reply) in gateway.classify_batch(instruction, &labels, &items).into_iter().enumerate() {
        match reply {
            Ok(r) => match match_category(&r, &labels) {
                Some(c) => outcome[i] = Some(c),
                None => retry.push(i),
            },
            Err(e) => {
                warn!(id = %sample[i].id, error = %e, "classification failed; sample dropped");
                failed[i] = true;
                first_err.get_or_insert(e);
            }
        }
    }
    if !retry.is_empty() {
        let again: Vec<(&str, &str)> = retry.iter().map(|&i| items[i]).collect();
        for (&i, reply) in retry.iter().zip(gateway.classify_batch(instruction, &labels, &again)) {
            match reply {
                Ok(r) => outcome[i] = match_category(&r, &labels),
                Err(e) => {
                    failed[i] = true;
                    first_err.get_or_insert(e);
                }
            }
        }
    }

    let mut drops = DropReport {
        total: sample.len(),
        ..Default::default()
    };
    let mut kept = Vec::new();
    for (i, rec) in sample.iter().enumerate() {
        match outcome[i] {
            Some(c) => kept.push((rec.id.clone(), c)),
            None if failed[i] => drops.failed.push(rec.id.clone()),
            None => drops.unmatched.push(rec.id.clone()),
        }
    }
    if kept.is_empty() && drops.failed.len() == sample.len() {
        return Err(TaxonomyError::AllClassificationsFailed(first_err.expect("failures recorded")));
    }
    if drops.dropped() * 2 > drops.total {
        return Err(TaxonomyError::TooManyDropped {
            dropped: drops.dropped(),
            total: drops.total,
        });
    }
    if drops.dropped() > 0 {
        warn!(dropped = drops.dropped(), total = drops.total, "samples dropped during classification");
    }
    let ids: Vec<String> = kept.iter().map(|(id, _)| id.clone()).collect();
    let vectors = store.read(Some(&ids))?;
    let samples = kept
        .into_iter()
        .zip(vectors)
        .map(|((text_id, label_index), embedding)| AnnotatedSample {
            text_id,
            embedding,
            label_index,
        })
        .collect();
    Ok(Annotation { samples, drops })
}
