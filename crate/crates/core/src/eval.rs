//! Instruction-awareness scoring: clustering V-measure, pair-similarity
//! Spearman correlation and triplet accuracy, plus their samplers.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::corpus::{self, CorpusError, TextRecord};
use crate::taxonomy::{kmeans_pp, KMeansError, DEFAULT_MAX_ITERS};
use crate::vectorlab::{cosine_distance, cosine_similarity, EmbeddingVector, VectorError};

/// k-means restarts per clustering score.
pub const CLUSTER_RESTARTS: u64 = 10;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("degenerate input: {0}")]
    DegenerateInput(&'static str),
    #[error("no valid triplet exists for aspect {0:?}")]
    NoTriplets(String),
    #[error("record {id:?} has no label for aspect {aspect:?}")]
    MissingLabel { id: String, aspect: String },
    #[error("no vector for id {0:?}")]
    MissingVector(String),
    #[error(transparent)]
    Vector(#[from] VectorError),
    #[error(transparent)]
    KMeans(#[from] KMeansError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalTask {
    Clustering,
    Sts,
    Triplet,
}

impl std::fmt::Display for EvalTask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Clustering => "clustering",
            Self::Sts => "sts",
            Self::Triplet => "triplet",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: EvalTask,
    /// Raw scores in `[0, 1]` (`[-1, 1]` for STS), keyed by aspect.
    pub per_aspect_scores: BTreeMap<String, f64>,
    pub aggregate: f64,
    pub seed: u64,
    /// Points, pairs or triplets scored per aspect.
    pub sample_counts: BTreeMap<String, usize>,
}

/// Records with gold labels for each declared aspect.
#[derive(Debug, Clone)]
pub struct EvalDataset {
    pub records: Vec<TextRecord>,
    pub aspects: Vec<String>,
}

impl EvalDataset {
    pub fn new(records: Vec<TextRecord>, aspects: Vec<String>) -> Result<Self, EvalError> {
        if records.is_empty() || aspects.is_empty() {
            return Err(EvalError::Empty);
        }
        for r in &records {
            for a in &aspects {
                if !r.labels.contains_key(a) {
                    return Err(EvalError::MissingLabel {
                        id: r.id.clone(),
                        aspect: a.clone(),
                    });
                }
            }
        }
        Ok(Self { records, aspects })
    }

    /// Loads a JSONL dataset; with no aspects given, uses every aspect the
    /// first record carries.
    pub fn load(path: &Path, aspects: &[String]) -> Result<Self, EvalError> {
        let records = corpus::load_corpus(path)?;
        let aspects = if aspects.is_empty() {
            records.first().map(|r| r.labels.keys().cloned().collect()).unwrap_or_default()
        } else {
            aspects.to_vec()
        };
        Self::new(records, aspects)
    }

    /// Gold label indices for `aspect`, in record order.
    pub fn gold(&self, aspect: &str) -> Result<Vec<usize>, EvalError> {
        let mut names: HashMap<&str, usize> = HashMap::new();
        self.records
            .iter()
            .map(|r| {
                let label = r.labels.get(aspect).ok_or_else(|| EvalError::MissingLabel {
                    id: r.id.clone(),
                    aspect: aspect.to_string(),
                })?;
                let next = names.len();
                Ok(*names.entry(label.as_str()).or_insert(next))
            })
            .collect()
    }
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// V-measure of a predicted clustering against gold classes, with natural-log
/// entropies.
pub fn v_measure(gold: &[usize], pred: &[usize]) -> Result<f64, EvalError> {
    if gold.len() != pred.len() {
        return Err(EvalError::LengthMismatch(gold.len(), pred.len()));
    }
    if gold.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = gold.len() as f64;
    let mut table: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut class_counts: BTreeMap<usize, usize> = BTreeMap::new();
    let mut cluster_counts: BTreeMap<usize, usize> = BTreeMap::new();
    for (&c, &k) in gold.iter().zip(pred) {
        *table.entry((c, k)).or_default() += 1;
        *class_counts.entry(c).or_default() += 1;
        *cluster_counts.entry(k).or_default() += 1;
    }
    let h_c = entropy(class_counts.values().copied(), n);
    let h_k = entropy(cluster_counts.values().copied(), n);
    // H(C|K) = −Σ n_ck/n · ln(n_ck/n_k); H(K|C) symmetric
    let mut h_c_given_k = 0.0;
    let mut h_k_given_c = 0.0;
    for (&(c, k), &n_ck) in &table {
        let p = n_ck as f64 / n;
        h_c_given_k -= p * (n_ck as f64 / cluster_counts[&k] as f64).ln();
        h_k_given_c -= p * (n_ck as f64 / class_counts[&c] as f64).ln();
    }
    let h = if h_c == 0.0 { 1.0 } else { 1.0 - h_c_given_k / h_c };
    let c = if h_k == 0.0 { 1.0 } else { 1.0 - h_k_given_c / h_k };
    Ok(if h + c == 0.0 { 0.0 } else { 2.0 * h * c / (h + c) })
}

/// Clusters `vectors` with k = number of distinct gold labels, keeps the
/// lowest-inertia run of [`CLUSTER_RESTARTS`], and scores it by V-measure.
pub fn cluster_and_score(vectors: &[EmbeddingVector], gold: &[usize], seed: u64) -> Result<f64, EvalError> {
    if vectors.len() != gold.len() {
        return Err(EvalError::LengthMismatch(vectors.len(), gold.len()));
    }
    if vectors.is_empty() {
        return Err(EvalError::Empty);
    }
    let k = gold.iter().collect::<BTreeSet<_>>().len();
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<crate::taxonomy::ClusteringResult> = None;
    for _ in 0..CLUSTER_RESTARTS {
        let r = kmeans_pp(vectors, k, seeds.gen(), DEFAULT_MAX_ITERS)?;
        if best.as_ref().is_none_or(|b| r.inertia < b.inertia) {
            best = Some(r);
        }
    }
    v_measure(gold, &best.expect("at least one restart").assignments)
}

/// Maps a linear index over unordered pairs `i < j` back to `(i, j)`.
fn unrank_pair(p: usize, n: usize) -> (usize, usize) {
    // row i starts at i·(2n − i − 1)/2
    let start = |i: usize| i * (2 * n - i - 1) / 2;
    let nf = n as f64;
    let guess = (nf - 0.5 - ((nf - 0.5).powi(2) - 2.0 * p as f64).max(0.0).sqrt()).floor();
    let mut i = (guess.max(0.0) as usize).min(n - 2);
    while i > 0 && start(i) > p {
        i -= 1;
    }
    while i + 1 < n - 1 && start(i + 1) <= p {
        i += 1;
    }
    (i, i + 1 + p - start(i))
}

/// Distinct unordered index pairs, sampled uniformly without replacement
/// (all pairs when there are at most `n_pairs`), with label 1 when both
/// records share the class.
pub fn sample_sts_pairs(gold: &[usize], n_pairs: usize, seed: u64) -> Result<Vec<(usize, usize, u8)>, EvalError> {
    let n = gold.len();
    if n < 2 {
        return Err(EvalError::Empty);
    }
    let total = n * (n - 1) / 2;
    let mut picks: Vec<usize> = if n_pairs >= total {
        (0..total).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        index::sample(&mut rng, total, n_pairs).into_vec()
    };
    picks.sort_unstable();
    Ok(picks
        .into_iter()
        .map(|p| {
            let (i, j) = unrank_pair(p, n);
            (i, j, u8::from(gold[i] == gold[j]))
        })
        .collect())
}

/// Average ranks (1-based), ties sharing the mean of their positions.
fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    (cov / (va * vb).sqrt()).clamp(-1.0, 1.0)
}

/// Spearman correlation: Pearson correlation of tie-averaged ranks.
pub fn spearman(labels: &[f64], sims: &[f64]) -> Result<f64, EvalError> {
    if labels.len() != sims.len() {
        return Err(EvalError::LengthMismatch(labels.len(), sims.len()));
    }
    if labels.len() < 2 {
        return Err(EvalError::DegenerateInput("need at least two pairs"));
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(EvalError::DegenerateInput("all labels equal"));
    }
    if sims.iter().all(|&s| s == sims[0]) {
        return Err(EvalError::DegenerateInput("all similarities equal"));
    }
    Ok(pearson(&average_ranks(labels), &average_ranks(sims)))
}

/// Triplets `(anchor, positive, negative)` drawn uniformly (with replacement)
/// from all valid ordered triplets: anchor and positive distinct members of
/// one class, negative from another.
pub fn sample_triplets(gold: &[usize], n: usize, seed: u64) -> Result<Vec<(usize, usize, usize)>, EvalError> {
    let mut classes: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in gold.iter().enumerate() {
        classes.entry(c).or_default().push(i);
    }
    let total = gold.len();
    // all indices grouped by class; class `ci` occupies `flat[start[ci]..start[ci] + len]`
    let members: Vec<&Vec<usize>> = classes.values().collect();
    let flat: Vec<usize> = members.iter().flat_map(|m| m.iter().copied()).collect();
    let mut start = Vec::with_capacity(members.len());
    let mut offset = 0;
    for m in &members {
        start.push(offset);
        offset += m.len();
    }
    let weights: Vec<f64> = members
        .iter()
        .map(|m| {
            let c = m.len() as f64;
            c * (c - 1.0) * (total as f64 - c)
        })
        .collect();
    let pick_class = WeightedIndex::new(&weights).map_err(|_| EvalError::NoTriplets(String::new()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let ci = pick_class.sample(&mut rng);
            let m = members[ci];
            let a = rng.gen_range(0..m.len());
            let mut p = rng.gen_range(0..m.len() - 1);
            if p >= a {
                p += 1;
            }
            // negative: uniform over the records outside the class
            let r = rng.gen_range(0..total - m.len());
            let neg = if r < start[ci] { flat[r] } else { flat[r + m.len()] };
            (m[a], m[p], neg)
        })
        .collect())
}

/// Fraction of triplets whose anchor is strictly closer (cosine distance) to
/// the positive than to the negative. Exact ties count as incorrect.
pub fn triplet_accuracy(vectors: &[EmbeddingVector], triplets: &[(usize, usize, usize)]) -> Result<f64, EvalError> {
    if triplets.is_empty() {
        return Err(EvalError::Empty);
    }
    let get = |i: usize| vectors.get(i).ok_or_else(|| EvalError::MissingVector(i.to_string()));
    let mut correct = 0usize;
    for &(a, p, n) in triplets {
        let (va, vp, vn) = (get(a)?, get(p)?, get(n)?);
        if cosine_distance(va, vp)? < cosine_distance(va, vn)? {
            correct += 1;
        }
    }
    Ok(correct as f64 / triplets.len() as f64)
}

/// Clustering and triplet scores combine by harmonic mean (0 if any score
/// is not positive); STS scores by arithmetic mean.
pub fn aggregate(task: EvalTask, scores: &[f64]) -> Result<f64, EvalError> {
    if scores.is_empty() {
        return Err(EvalError::Empty);
    }
    if scores.len() == 1 {
        return Ok(scores[0]);
    }
    Ok(match task {
        EvalTask::Sts => scores.iter().sum::<f64>() / scores.len() as f64,
        EvalTask::Clustering | EvalTask::Triplet => {
            if scores.iter().any(|&s| s <= 0.0) {
                warn!(%task, "non-positive aspect score; harmonic mean defined as 0");
                0.0
            } else {
                scores.len() as f64 / scores.iter().map(|s| 1.0 / s).sum::<f64>()
            }
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalSizes {
    pub n_pairs: usize,
    pub n_triplets: usize,
}

impl Default for EvalSizes {
    fn default() -> Self {
        Self {
            n_pairs: 50_000,
            n_triplets: 50_000,
        }
    }
}

/// Scores one task on every aspect of `dataset`; `vectors[i]` belongs to
/// `dataset.records[i]`.
pub fn evaluate(
    task: EvalTask,
    dataset: &EvalDataset,
    vectors: &[EmbeddingVector],
    sizes: EvalSizes,
    seed: u64,
) -> Result<EvalReport, EvalError> {
    if vectors.len() != dataset.records.len() {
        return Err(EvalError::LengthMismatch(vectors.len(), dataset.records.len()));
    }
    let mut per_aspect_scores = BTreeMap::new();
    let mut sample_counts = BTreeMap::new();
    for aspect in &dataset.aspects {
        let gold = dataset.gold(aspect)?;
        let (score, count) = match task {
            EvalTask::Clustering => (cluster_and_score(vectors, &gold, seed)?, vectors.len()),
            EvalTask::Sts => {
                let pairs = sample_sts_pairs(&gold, sizes.n_pairs, seed)?;
                let labels: Vec<f64> = pairs.iter().map(|p| f64::from(p.2)).collect();
                let sims = pairs
                    .iter()
                    .map(|&(i, j, _)| cosine_similarity(&vectors[i], &vectors[j]))
                    .collect::<Result<Vec<_>, _>>()?;
                (spearman(&labels, &sims)?, pairs.len())
            }
            EvalTask::Triplet => {
                let triplets = sample_triplets(&gold, sizes.n_triplets, seed)
                    .map_err(|_| EvalError::NoTriplets(aspect.clone()))?;
                (triplet_accuracy(vectors, &triplets)?, triplets.len())
            }
        };
        per_aspect_scores.insert(aspect.clone(), score);
        sample_counts.insert(aspect.clone(), count);
    }
    let scores: Vec<f64> = dataset.aspects.iter().map(|a| per_aspect_scores[a]).collect();
    Ok(EvalReport {
        task,
        aggregate: aggregate(task, &scores)?,
        per_aspect_scores,
        seed,
        sample_counts,
    })
}
