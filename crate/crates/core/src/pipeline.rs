//! End-to-end orchestration: embed, build taxonomy, train, transform, evaluate.
//!
//! Stage outputs live in `output_dir` and are content-addressed in
//! `manifest.json`. [`Pipeline::run`] skips a stage whose fingerprint (the
//! config it reads plus the hashes of its inputs) and outputs are unchanged,
//! and reruns every stage after the first one that did work.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File};
use std::io::{self, Read};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tracing::{info, warn};

use crate::corpus::{self, write_atomic, CorpusError, TextRecord};
use crate::embed::store::{StoreLock, IDS_FILE, META_FILE, VECTORS_FILE};
use crate::embed::{self, EmbedError, EmbedderConfig, StoreError, StoreWriter, VectorStore};
use crate::eval::{self, EvalDataset, EvalError, EvalReport, EvalSizes, EvalTask};
use crate::llm::{LlmCallLedger, LlmError, LlmGateway, LlmProviderConfig, ProviderKind};
use crate::taxonomy::{
    self, AnnotatedSample, AnnotationRecord, Instruction, LabelTaxonomy, Provenance, TaxonomyError,
    TaxonomyOptions,
};
use crate::transform::{self, ModelMetadata, TrainConfig, TransformError, TransformKind, TransformModel};
use crate::vectorlab::{cosine_distance, VectorError};

pub const TAXONOMY_FILE: &str = "taxonomy.json";
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const MODEL_FILE: &str = "model.json";
pub const TRANSFORMED_DIR: &str = "transformed";
pub const REPORT_FILE: &str = "report.json";
pub const GENERIC_REPORT_FILE: &str = "report_generic.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TIMINGS_FILE: &str = "timings.json";

/// Texts per embedding call batch appended to the store.
const EMBED_CHUNK: usize = 4096;
/// Rows read from the store per transform step.
const STREAM_CHUNK: usize = 4096;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("unknown aspect {aspect:?}; available: {}", .available.join(", "))]
    UnknownAspect { aspect: String, available: Vec<String> },
    #[error("output directory {0} is in use by another pipeline")]
    Locked(PathBuf),
    #[error("missing artifact {0}; run the earlier stage first")]
    MissingArtifact(PathBuf),
    #[error("{failed} of {total} texts failed to embed (first error: {first})")]
    EmbedFailures {
        failed: usize,
        total: usize,
        first: Box<EmbedError>,
    },
    #[error("annotation {text_id:?} has label index {index} but the taxonomy has {k} categories")]
    BadAnnotation { text_id: String, index: usize, k: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("invalid json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Vector(#[from] VectorError),
}

fn llm_exit(e: &LlmError) -> i32 {
    match e {
        LlmError::Config(_) => 2,
        _ => 3,
    }
}

fn embed_exit(e: &EmbedError) -> i32 {
    match e {
        EmbedError::Provider(_) => 3,
        EmbedError::Config(_) => 2,
        _ => 4,
    }
}

impl PipelineError {
    /// Process exit code: 2 config, 3 provider, 4 data or contract.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::UnknownAspect { .. } => 2,
            Self::EmbedFailures { first, .. } => embed_exit(first),
            Self::Embed(e) => embed_exit(e),
            Self::Llm(e) => llm_exit(e),
            Self::Taxonomy(e) => match e {
                TaxonomyError::Options(_) | TaxonomyError::EmptyInstruction => 2,
                TaxonomyError::AllSummariesFailed(_) | TaxonomyError::AllClassificationsFailed(_) => 3,
                TaxonomyError::Llm(e) => llm_exit(e),
                TaxonomyError::Embed(e) => embed_exit(e),
                _ => 4,
            },
            Self::Transform(TransformError::Config(_)) => 2,
            _ => 4,
        }
    }
}

type Result<T> = std::result::Result<T, PipelineError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub task: EvalTask,
    /// Gold-label aspects to score; empty means every aspect all records carry.
    pub aspects: Vec<String>,
    pub n_pairs: usize,
    pub n_triplets: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let sizes = EvalSizes::default();
        Self {
            task: EvalTask::Clustering,
            aspects: Vec::new(),
            n_pairs: sizes.n_pairs,
            n_triplets: sizes.n_triplets,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub corpus_path: PathBuf,
    /// Root of the generic-embedding cache; each embedder model gets a subdirectory.
    pub store_path: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    pub instruction: String,
    pub aspect_name: String,
    #[serde(default)]
    pub embedder: EmbedderConfig,
    #[serde(default)]
    pub llm: LlmProviderConfig,
    #[serde(default)]
    pub taxonomy: TaxonomyOptions,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl PipelineConfig {
    /// Minimal config with defaults everywhere else.
    pub fn new(
        corpus_path: impl Into<PathBuf>,
        store_path: impl Into<PathBuf>,
        output_dir: impl Into<PathBuf>,
        instruction: Instruction,
    ) -> Self {
        Self {
            corpus_path: corpus_path.into(),
            store_path: store_path.into(),
            output_dir: output_dir.into(),
            seed: 0,
            instruction: instruction.text,
            aspect_name: instruction.aspect_name,
            embedder: EmbedderConfig::default(),
            llm: LlmProviderConfig::default(),
            taxonomy: TaxonomyOptions::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| PipelineError::Config(e.to_string()))
    }

    /// Reads a TOML file; relative paths are taken relative to its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&raw)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.corpus_path);
        fix(&mut self.store_path);
        fix(&mut self.output_dir);
        if let Some(p) = self.llm.fixture_path.as_mut() {
            fix(p);
        }
    }

    pub fn instruction(&self) -> Instruction {
        Instruction::new(self.instruction.clone(), self.aspect_name.clone())
    }

    /// Store directory for the configured embedder model.
    pub fn store_dir(&self) -> PathBuf {
        self.store_path.join(sanitize(&self.embedder.model_name))
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: String| PipelineError::Config(e);
        if self.instruction.trim().is_empty() {
            return Err(cfg("instruction is empty".into()));
        }
        self.embedder.validate().map_err(|e| cfg(e.to_string()))?;
        self.llm.validate().map_err(|e| cfg(e.to_string()))?;
        self.taxonomy.validate().map_err(|e| cfg(e.to_string()))?;
        self.train.validate().map_err(|e| cfg(e.to_string()))?;
        if self.eval.n_pairs == 0 || self.eval.n_triplets == 0 {
            return Err(cfg("eval.n_pairs and eval.n_triplets must be >= 1".into()));
        }
        Ok(())
    }
}

fn sanitize(name: &str) -> String {
    let s: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect();
    if s.is_empty() || s.chars().all(|c| c == '.') {
        "default".into()
    } else {
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Embed,
    BuildTaxonomy,
    Train,
    Transform,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Self::Embed, Self::BuildTaxonomy, Self::Train, Self::Transform, Self::Evaluate];

    pub fn name(self) -> &'static str {
        match self {
            Self::Embed => "embed",
            Self::BuildTaxonomy => "build_taxonomy",
            Self::Train => "train",
            Self::Transform => "transform",
            Self::Evaluate => "evaluate",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    Generic,
    Transformed,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    /// SHA-256 over the stage's config section and input hashes.
    pub fingerprint: String,
    /// Artifact name to SHA-256.
    pub outputs: BTreeMap<String, String>,
    /// LLM requests the stage issued.
    pub ledger: LlmCallLedger,
}

/// Content hashes of every artifact and the LLM-call totals. Wall-clock
/// timings go to a separate file so identical runs give identical manifests.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub stages: BTreeMap<String, StageRecord>,
    pub ledger: LlmCallLedger,
}

impl Manifest {
    fn recompute_totals(&mut self) {
        let mut total = LlmCallLedger::default();
        for r in self.stages.values() {
            total.add(&r.ledger);
        }
        self.ledger = total;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct EmbedSummary {
    pub cached: usize,
    pub embedded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaxonomySummary {
    pub provenance: Provenance,
    pub categories: Vec<String>,
    pub annotated: usize,
    pub dropped: usize,
    pub ledger: LlmCallLedger,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub kind: TransformKind,
    pub d_in: usize,
    pub d_out: usize,
    pub metadata: ModelMetadata,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TransformSummary {
    pub count: usize,
    pub d_out: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StageOutcome {
    Ran,
    UpToDate,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub stages: Vec<(Stage, StageOutcome)>,
    pub embed: EmbedSummary,
    pub report: Option<EvalReport>,
    pub ledger: LlmCallLedger,
}

/// Cosine distances for one id pair before and after the transform.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistanceRow {
    pub a: String,
    pub b: String,
    pub generic: f64,
    pub transformed: f64,
}

/// Hex SHA-256 of a file, read in blocks.
pub fn sha256_file(path: &Path) -> io::Result<String> {
    let mut hasher = Sha256::new();
    hash_into(&mut hasher, path)?;
    Ok(hex::encode(hasher.finalize()))
}

fn hash_into(hasher: &mut Sha256, path: &Path) -> io::Result<()> {
    let mut f = File::open(path)?;
    let mut buf = vec![0u8; 1 << 20];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            return Ok(());
        }
        hasher.update(&buf[..n]);
    }
}

/// Hex SHA-256 over a store's header, id list and payload.
pub fn sha256_store(dir: &Path) -> io::Result<String> {
    let mut hasher = Sha256::new();
    for name in [META_FILE, IDS_FILE, VECTORS_FILE] {
        hasher.update(name.as_bytes());
        hash_into(&mut hasher, &dir.join(name))?;
    }
    Ok(hex::encode(hasher.finalize()))
}

fn sha256_json(value: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(value.to_string().as_bytes()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|source| PipelineError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    bytes.push(b'\n');
    write_atomic(path, &bytes).map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(PipelineError::MissingArtifact(path.to_path_buf()));
    }
    let raw = fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&raw).map_err(|source| PipelineError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Opens the store at `dir` if there is one; refuses directories holding
/// store payload without a header.
fn open_store_if_any(dir: &Path) -> Result<Option<VectorStore>> {
    if VectorStore::exists(dir) {
        return Ok(Some(VectorStore::open(dir)?));
    }
    if dir.join(IDS_FILE).exists() || dir.join(VECTORS_FILE).exists() {
        return Err(StoreError::CorruptHeader {
            path: dir.join(META_FILE),
            reason: "missing header".into(),
        }
        .into());
    }
    Ok(None)
}

fn open_store(dir: &Path) -> Result<VectorStore> {
    open_store_if_any(dir)?.ok_or_else(|| PipelineError::MissingArtifact(dir.to_path_buf()))
}

/// Aspects every record is labelled with, sorted.
fn common_aspects(records: &[TextRecord]) -> Vec<String> {
    let Some(first) = records.first() else {
        return Vec::new();
    };
    first
        .labels
        .keys()
        .filter(|a| records.iter().all(|r| r.labels.contains_key(*a)))
        .cloned()
        .collect()
}

/// One pipeline bound to an output directory, which it holds locked.
pub struct Pipeline {
    config: PipelineConfig,
    gateway: Option<LlmGateway>,
    manifest: Manifest,
    timings: BTreeMap<String, f64>,
    _lock: StoreLock,
}

impl std::fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pipeline")
            .field("output_dir", &self.config.output_dir)
            .field("manifest", &self.manifest)
            .finish_non_exhaustive()
    }
}

impl Pipeline {
    /// Validates the config, locks `output_dir` and loads any previous manifest.
    /// The LLM gateway is built from the config on first use.
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let out = config.output_dir.clone();
        fs::create_dir_all(&out).map_err(io_err(&out))?;
        let lock = StoreLock::acquire(&out).map_err(|e| match e {
            StoreError::Locked(p) => PipelineError::Locked(p),
            other => other.into(),
        })?;
        let manifest_path = out.join(MANIFEST_FILE);
        let mut manifest = if manifest_path.exists() {
            read_json(&manifest_path).unwrap_or_else(|e| {
                warn!(error = %e, "unreadable manifest; every stage will rerun");
                Manifest::default()
            })
        } else {
            Manifest::default()
        };
        if manifest.seed != config.seed {
            manifest = Manifest::default();
        }
        manifest.seed = config.seed;
        Ok(Self {
            config,
            gateway: None,
            manifest,
            timings: BTreeMap::new(),
            _lock: lock,
        })
    }

    /// Uses `gateway` (for example a mock backend) instead of building one
    /// from `config.llm`.
    pub fn with_gateway(config: PipelineConfig, gateway: LlmGateway) -> Result<Self> {
        let seed = config.seed;
        let mut p = Self::new(config)?;
        p.gateway = Some(gateway.with_seed(seed));
        Ok(p)
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    /// Requests issued so far through this pipeline's gateway.
    pub fn ledger(&self) -> LlmCallLedger {
        self.gateway.as_ref().map(LlmGateway::ledger).unwrap_or_default()
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.config.output_dir.join(name)
    }

    fn ensure_gateway(&mut self) -> Result<()> {
        if self.gateway.is_none() {
            self.gateway = Some(LlmGateway::from_config(&self.config.llm)?.with_seed(self.config.seed));
        }
        Ok(())
    }

    fn corpus(&self) -> Result<Vec<TextRecord>> {
        Ok(corpus::load_corpus(&self.config.corpus_path)?)
    }

    fn hash(&self, path: &Path) -> Result<Option<String>> {
        if !path.exists() {
            return Ok(None);
        }
        let h = if path.is_dir() { sha256_store(path) } else { sha256_file(path) };
        h.map(Some).map_err(io_err(path))
    }

    fn require_hash(&self, path: &Path) -> Result<String> {
        self.hash(path)?.ok_or_else(|| PipelineError::MissingArtifact(path.to_path_buf()))
    }

    fn llm_identity(&self) -> Result<serde_json::Value> {
        let llm = &self.config.llm;
        let fixture = match (&llm.provider, &llm.fixture_path) {
            (ProviderKind::MockFixture, Some(p)) => self.hash(p)?,
            _ => None,
        };
        Ok(serde_json::json!({
            "provider": llm.provider,
            "endpoint_url": llm.endpoint_url,
            "model_name": llm.model_name,
            "temperature": llm.temperature,
            "max_retries": llm.max_retries,
            "fixture": fixture,
        }))
    }

    fn stage_key(stage: Stage, space: Space) -> String {
        match (stage, space) {
            (Stage::Evaluate, Space::Generic) => "evaluate_generic".into(),
            _ => stage.name().into(),
        }
    }

    /// Fingerprint of a stage's inputs; `None` when an input is missing.
    fn fingerprint(&self, stage: Stage, space: Space) -> Result<Option<String>> {
        let cfg = &self.config;
        let out = |name: &str| self.artifact(name);
        let Some(corpus) = self.hash(&cfg.corpus_path)? else {
            return Ok(None);
        };
        let value = match stage {
            Stage::Embed => serde_json::json!({ "corpus": corpus, "embedder": cfg.embedder }),
            Stage::BuildTaxonomy => {
                let Some(store) = self.hash(&cfg.store_dir())? else { return Ok(None) };
                serde_json::json!({
                    "corpus": corpus,
                    "store": store,
                    "instruction": cfg.instruction,
                    "aspect_name": cfg.aspect_name,
                    "taxonomy": cfg.taxonomy,
                    "embedder": cfg.embedder,
                    "llm": self.llm_identity()?,
                    "seed": cfg.seed,
                })
            }
            Stage::Train => {
                let (Some(t), Some(a), Some(s)) = (
                    self.hash(&out(TAXONOMY_FILE))?,
                    self.hash(&out(ANNOTATIONS_FILE))?,
                    self.hash(&cfg.store_dir())?,
                ) else {
                    return Ok(None);
                };
                serde_json::json!({ "taxonomy": t, "annotations": a, "store": s, "train": cfg.train, "seed": cfg.seed })
            }
            Stage::Transform => {
                let (Some(m), Some(s)) = (self.hash(&out(MODEL_FILE))?, self.hash(&cfg.store_dir())?) else {
                    return Ok(None);
                };
                serde_json::json!({ "model": m, "store": s })
            }
            Stage::Evaluate => {
                let dir = match space {
                    Space::Generic => cfg.store_dir(),
                    Space::Transformed => out(TRANSFORMED_DIR),
                };
                let Some(s) = self.hash(&dir)? else { return Ok(None) };
                serde_json::json!({ "corpus": corpus, "store": s, "space": space, "eval": cfg.eval, "seed": cfg.seed })
            }
        };
        Ok(Some(sha256_json(&value)))
    }

    fn is_fresh(&self, stage: Stage, space: Space) -> Result<bool> {
        let Some(record) = self.manifest.stages.get(&Self::stage_key(stage, space)) else {
            return Ok(false);
        };
        if self.fingerprint(stage, space)?.as_deref() != Some(record.fingerprint.as_str()) {
            return Ok(false);
        }
        for (name, hash) in &record.outputs {
            let path = if stage == Stage::Embed { self.config.store_dir() } else { self.artifact(name) };
            if self.hash(&path)?.as_deref() != Some(hash.as_str()) {
                return Ok(false);
            }
        }
        Ok(true)
    }

    fn record(
        &mut self,
        stage: Stage,
        space: Space,
        outputs: &[(&str, PathBuf)],
        ledger: LlmCallLedger,
        started: Instant,
    ) -> Result<()> {
        let fingerprint = self.fingerprint(stage, space)?.unwrap_or_default();
        let mut hashes = BTreeMap::new();
        for (name, path) in outputs {
            hashes.insert((*name).to_string(), self.require_hash(path)?);
        }
        let key = Self::stage_key(stage, space);
        self.manifest.stages.insert(
            key.clone(),
            StageRecord {
                fingerprint,
                outputs: hashes,
                ledger,
            },
        );
        self.manifest.recompute_totals();
        self.timings.insert(key, started.elapsed().as_secs_f64());
        write_json(&self.artifact(MANIFEST_FILE), &self.manifest)?;
        self.write_timings()
    }

    fn write_timings(&self) -> Result<()> {
        let path = self.artifact(TIMINGS_FILE);
        let mut all: BTreeMap<String, f64> = if path.exists() { read_json(&path).unwrap_or_default() } else { BTreeMap::new() };
        all.extend(self.timings.iter().map(|(k, v)| (k.clone(), *v)));
        write_json(&path, &all)
    }

    /// Embeds corpus texts missing from the store and appends them.
    pub fn embed(&mut self) -> Result<EmbedSummary> {
        let started = Instant::now();
        let corpus = self.corpus()?;
        let dir = self.config.store_dir();
        let mut store = open_store_if_any(&dir)?;
        let missing: Vec<&TextRecord> = corpus
            .iter()
            .filter(|r| store.as_ref().map_or(true, |s| !s.contains(&r.id)))
            .collect();
        let cached = corpus.len() - missing.len();
        let mut embedded = 0;
        let mut failed = 0;
        let mut first_err = None;
        for chunk in missing.chunks(EMBED_CHUNK) {
            let items: Vec<(&str, &str)> = chunk.iter().map(|r| (r.id.as_str(), r.text.as_str())).collect();
            let results = embed::embed_texts(&self.config.embedder, store.as_ref(), &items)?;
            let mut ids = Vec::with_capacity(chunk.len());
            let mut vectors = Vec::with_capacity(chunk.len());
            for (rec, res) in chunk.iter().zip(results) {
                match res {
                    Ok(v) => {
                        ids.push(rec.id.clone());
                        vectors.push(v);
                    }
                    Err(e) => {
                        warn!(id = %rec.id, error = %e, "embedding failed");
                        failed += 1;
                        first_err.get_or_insert(e);
                    }
                }
            }
            if ids.is_empty() {
                continue;
            }
            match store.as_mut() {
                Some(s) => s.append(&ids, &vectors)?,
                None => store = Some(embed::store_write(&dir, &ids, &vectors)?),
            }
            embedded += ids.len();
        }
        info!(cached, embedded, failed, store = %dir.display(), "embed stage done");
        if store.is_some() {
            self.record(Stage::Embed, Space::Generic, &[("store", dir)], LlmCallLedger::default(), started)?;
        }
        if let Some(first) = first_err {
            return Err(PipelineError::EmbedFailures {
                failed,
                total: missing.len(),
                first: Box::new(first),
            });
        }
        Ok(EmbedSummary { cached, embedded })
    }

    /// Builds the taxonomy and classifies the sample; writes the taxonomy
    /// and annotation files.
    pub fn build_taxonomy(&mut self) -> Result<TaxonomySummary> {
        let started = Instant::now();
        let corpus = self.corpus()?;
        let store = open_store(&self.config.store_dir())?;
        self.ensure_gateway()?;
        let gateway = self.gateway.as_ref().expect("gateway built");
        let before = gateway.ledger();

        let cfg = &self.config;
        let taxonomy = taxonomy::build_taxonomy(
            &cfg.instruction(),
            &corpus,
            &store,
            &cfg.embedder,
            gateway,
            &cfg.taxonomy,
            cfg.seed,
        )?;
        let by_id: HashMap<&str, &TextRecord> = corpus.iter().map(|r| (r.id.as_str(), r)).collect();
        let sample: Vec<&TextRecord> = taxonomy.sampled_ids.iter().map(|id| by_id[id.as_str()]).collect();
        let annotation = taxonomy::annotate_samples(&taxonomy, &sample, &store, gateway)?;
        let ledger = gateway.ledger().since(&before);

        let taxonomy_path = self.artifact(TAXONOMY_FILE);
        let annotations_path = self.artifact(ANNOTATIONS_FILE);
        write_json(&taxonomy_path, &taxonomy)?;
        let mut lines = Vec::new();
        for rec in annotation.records(&taxonomy) {
            serde_json::to_writer(&mut lines, &rec).map_err(|source| PipelineError::Json {
                path: annotations_path.clone(),
                source,
            })?;
            lines.push(b'\n');
        }
        write_atomic(&annotations_path, &lines).map_err(io_err(&annotations_path))?;
        info!(
            categories = taxonomy.categories.len(),
            annotated = annotation.samples.len(),
            dropped = annotation.drops.dropped(),
            summarize = ledger.summarize,
            generate_label = ledger.generate_label,
            classify = ledger.classify,
            retry = ledger.retry,
            "taxonomy built"
        );
        self.record(
            Stage::BuildTaxonomy,
            Space::Generic,
            &[(TAXONOMY_FILE, taxonomy_path), (ANNOTATIONS_FILE, annotations_path)],
            ledger,
            started,
        )?;
        Ok(TaxonomySummary {
            provenance: taxonomy.provenance,
            categories: taxonomy.labels().into_iter().map(String::from).collect(),
            annotated: annotation.samples.len(),
            dropped: annotation.drops.dropped(),
            ledger,
        })
    }

    /// Loads the annotated samples with their generic embeddings.
    pub fn training_samples(&self) -> Result<(LabelTaxonomy, Vec<AnnotatedSample>)> {
        let taxonomy: LabelTaxonomy = read_json(&self.artifact(TAXONOMY_FILE))?;
        let path = self.artifact(ANNOTATIONS_FILE);
        if !path.exists() {
            return Err(PipelineError::MissingArtifact(path));
        }
        let records: Vec<AnnotationRecord> = corpus::read_jsonl(&path)?;
        for r in &records {
            if r.label_index >= taxonomy.categories.len() {
                return Err(PipelineError::BadAnnotation {
                    text_id: r.text_id.clone(),
                    index: r.label_index,
                    k: taxonomy.categories.len(),
                });
            }
        }
        let store = open_store(&self.config.store_dir())?;
        let ids: Vec<String> = records.iter().map(|r| r.text_id.clone()).collect();
        let vectors = store.read(Some(&ids))?;
        let samples = records
            .into_iter()
            .zip(vectors)
            .map(|(r, embedding)| AnnotatedSample {
                text_id: r.text_id,
                embedding,
                label_index: r.label_index,
            })
            .collect();
        Ok((taxonomy, samples))
    }

    /// Fits the configured transformation and writes the model file.
    pub fn train(&mut self) -> Result<TrainSummary> {
        let started = Instant::now();
        let (_, samples) = self.training_samples()?;
        let mut cfg = self.config.train.clone();
        cfg.seed = self.config.seed;
        let mut model = match cfg.transform {
            TransformKind::Autoencoder => transform::train(&samples, &cfg)?,
            TransformKind::Fda => transform::fda_model(&samples, &cfg)?,
        };
        model.metadata.taxonomy_hash = Some(self.require_hash(&self.artifact(TAXONOMY_FILE))?);
        let path = self.artifact(MODEL_FILE);
        model.save(&path)?;
        let m = &model.metadata;
        info!(
            kind = ?model.kind,
            epochs_run = m.epochs_run,
            best_epoch = m.best_epoch,
            initial_val_loss = ?m.initial_val_loss,
            final_val_loss = ?m.final_val_loss,
            "model trained"
        );
        self.record(Stage::Train, Space::Generic, &[(MODEL_FILE, path)], LlmCallLedger::default(), started)?;
        Ok(TrainSummary {
            kind: model.kind,
            d_in: model.d_in,
            d_out: model.d_out,
            metadata: model.metadata,
        })
    }

    /// Streams the generic store through the encoder into `transformed/`.
    /// Touches no LLM.
    pub fn transform(&mut self) -> Result<TransformSummary> {
        let started = Instant::now();
        let before = self.ledger();
        let model = TransformModel::load(&self.artifact(MODEL_FILE)).map_err(|e| match e {
            TransformError::Io { path, source } if source.kind() == io::ErrorKind::NotFound => {
                PipelineError::MissingArtifact(path.into())
            }
            other => other.into(),
        })?;
        let store = open_store(&self.config.store_dir())?;
        if store.dim() != model.d_in {
            return Err(TransformError::DimMismatch {
                expected: model.d_in,
                found: store.dim(),
            }
            .into());
        }
        let encoder = model.encoder();
        let dir = self.artifact(TRANSFORMED_DIR);
        let mut writer = StoreWriter::create(&dir, model.d_out)?;
        for chunk in store.chunks(STREAM_CHUNK)? {
            let (ids, xs) = chunk?;
            for (id, y) in ids.iter().zip(encoder.apply(&xs)?) {
                writer.push(id, &y)?;
            }
        }
        let out = writer.finish()?;
        let ledger = self.ledger().since(&before);
        info!(count = out.count(), d_out = out.dim(), "transform done");
        self.record(Stage::Transform, Space::Generic, &[(TRANSFORMED_DIR, dir)], ledger, started)?;
        Ok(TransformSummary {
            count: out.count(),
            d_out: out.dim(),
        })
    }

    fn eval_aspects(&self, records: &[TextRecord]) -> Result<Vec<String>> {
        let available = common_aspects(records);
        if self.config.eval.aspects.is_empty() {
            if available.is_empty() {
                return Err(PipelineError::Config("the corpus carries no gold labels to evaluate".into()));
            }
            return Ok(available);
        }
        let known: BTreeSet<&String> = available.iter().collect();
        for a in &self.config.eval.aspects {
            if !known.contains(a) {
                return Err(PipelineError::UnknownAspect {
                    aspect: a.clone(),
                    available,
                });
            }
        }
        Ok(self.config.eval.aspects.clone())
    }

    /// Scores the configured task in the given space and writes the report.
    pub fn evaluate(&mut self, space: Space) -> Result<EvalReport> {
        let started = Instant::now();
        let records = self.corpus()?;
        let aspects = self.eval_aspects(&records)?;
        let dir = match space {
            Space::Generic => self.config.store_dir(),
            Space::Transformed => self.artifact(TRANSFORMED_DIR),
        };
        let store = open_store(&dir)?;
        let ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
        let vectors = store.read(Some(&ids))?;
        let dataset = EvalDataset::new(records, aspects)?;
        let sizes = EvalSizes {
            n_pairs: self.config.eval.n_pairs,
            n_triplets: self.config.eval.n_triplets,
        };
        let report = eval::evaluate(self.config.eval.task, &dataset, &vectors, sizes, self.config.seed)?;
        let name = match space {
            Space::Generic => GENERIC_REPORT_FILE,
            Space::Transformed => REPORT_FILE,
        };
        let path = self.artifact(name);
        write_json(&path, &report)?;
        info!(task = %report.task, aggregate = report.aggregate, ?space, "evaluation done");
        self.record(Stage::Evaluate, space, &[(name, path)], LlmCallLedger::default(), started)?;
        Ok(report)
    }

    /// Runs every stage, skipping those whose inputs and outputs are unchanged.
    /// Evaluation is skipped when the corpus has no gold labels and none are configured.
    pub fn run(&mut self) -> Result<RunSummary> {
        let previous = self.manifest.stages.get(Stage::Embed.name()).cloned();
        let embed = self.embed()?;
        let mut dirty = self.manifest.stages.get(Stage::Embed.name()) != previous.as_ref();
        let mut stages = vec![(Stage::Embed, if dirty { StageOutcome::Ran } else { StageOutcome::UpToDate })];

        let mut report = None;
        for stage in [Stage::BuildTaxonomy, Stage::Train, Stage::Transform, Stage::Evaluate] {
            if stage == Stage::Evaluate
                && self.config.eval.aspects.is_empty()
                && common_aspects(&self.corpus()?).is_empty()
            {
                info!("no gold labels; evaluation skipped");
                stages.push((stage, StageOutcome::Skipped));
                continue;
            }
            if !dirty && self.is_fresh(stage, Space::Transformed)? {
                info!(%stage, "up to date");
                if stage == Stage::Evaluate {
                    report = Some(read_json(&self.artifact(REPORT_FILE))?);
                }
                stages.push((stage, StageOutcome::UpToDate));
                continue;
            }
            match stage {
                Stage::BuildTaxonomy => {
                    self.build_taxonomy()?;
                }
                Stage::Train => {
                    self.train()?;
                }
                Stage::Transform => {
                    self.transform()?;
                }
                Stage::Evaluate => report = Some(self.evaluate(Space::Transformed)?),
                Stage::Embed => unreachable!(),
            }
            dirty = true;
            stages.push((stage, StageOutcome::Ran));
        }
        Ok(RunSummary {
            stages,
            embed,
            report,
            ledger: self.manifest.ledger,
        })
    }

    /// Pairwise cosine distances among `ids`, generic versus transformed.
    pub fn report_distances(&self, ids: &[String]) -> Result<Vec<DistanceRow>> {
        let generic = open_store(&self.config.store_dir())?.read(Some(ids))?;
        let transformed = open_store(&self.artifact(TRANSFORMED_DIR))?.read(Some(ids))?;
        let mut rows = Vec::new();
        for i in 0..ids.len() {
            for j in i + 1..ids.len() {
                rows.push(DistanceRow {
                    a: ids[i].clone(),
                    b: ids[j].clone(),
                    generic: cosine_distance(&generic[i], &generic[j])?,
                    transformed: cosine_distance(&transformed[i], &transformed[j])?,
                });
            }
        }
        Ok(rows)
    }
}
