//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

use gst_core::corpus::TextRecord;
use gst_core::llm::mock::FixtureEntry;
use gst_core::llm::{CallKind, FnBackend, LlmError, LlmGateway, LlmProviderConfig, LlmRequest};
use gst_core::EmbeddingVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------- oracles

/// Loss written straight from the definition, with nested loops.
#[allow(clippy::too_many_arguments)]
pub fn naive_loss(
    w_enc: &[f64],
    b_enc: &[f64],
    w_dec: &[f64],
    b_dec: &[f64],
    x: &[Vec<f64>],
    y: &[usize],
    m: f64,
    beta: (f64, f64),
) -> f64 {
    let (d_out, d_in) = (b_enc.len(), b_dec.len());
    let n = x.len();
    let e: Vec<Vec<f64>> = x
        .iter()
        .map(|xi| (0..d_out).map(|r| b_enc[r] + (0..d_in).map(|c| w_enc[r * d_in + c] * xi[c]).sum::<f64>()).collect())
        .collect();
    let mut contr = 0.0;
    for i in 0..n {
        for j in 0..n {
            let d = e[i].iter().zip(&e[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            contr += if y[i] == y[j] { d * d } else { (m - d).max(0.0).powi(2) };
        }
    }
    contr /= (n * n) as f64;
    let mut recon = 0.0;
    for (xi, ei) in x.iter().zip(&e) {
        for r in 0..d_in {
            let xh = b_dec[r] + (0..d_out).map(|c| w_dec[r * d_out + c] * ei[c]).sum::<f64>();
            recon += (xh - xi[r]).powi(2);
        }
    }
    recon /= n as f64;
    beta.0 * contr + beta.1 * recon
}

/// V-measure via mutual information, base-2 logs, dense contingency table.
pub fn v_oracle(gold: &[usize], pred: &[usize]) -> f64 {
    let n = gold.len() as f64;
    let nc = gold.iter().max().unwrap() + 1;
    let nk = pred.iter().max().unwrap() + 1;
    let mut t = vec![vec![0.0; nk]; nc];
    for (&c, &k) in gold.iter().zip(pred) {
        t[c][k] += 1.0;
    }
    let row: Vec<f64> = t.iter().map(|r| r.iter().sum()).collect();
    let col: Vec<f64> = (0..nk).map(|k| t.iter().map(|r| r[k]).sum()).collect();
    let h = |v: &[f64]| -> f64 { v.iter().filter(|&&x| x > 0.0).map(|&x| -(x / n) * (x / n).log2()).sum() };
    let (hc, hk) = (h(&row), h(&col));
    let mut mi = 0.0;
    for c in 0..nc {
        for k in 0..nk {
            if t[c][k] > 0.0 {
                mi += t[c][k] / n * ((n * t[c][k]) / (row[c] * col[k])).log2();
            }
        }
    }
    // H(C|K) = H(C) − I, H(K|C) = H(K) − I
    let hom = if hc == 0.0 { 1.0 } else { mi / hc };
    let com = if hk == 0.0 { 1.0 } else { mi / hk };
    if hom + com == 0.0 {
        0.0
    } else {
        2.0 * hom * com / (hom + com)
    }
}

/// Rank = (#smaller) + (#equal + 1)/2, by counting.
pub fn rank_oracle(xs: &[f64]) -> Vec<f64> {
    xs.iter()
        .map(|&x| {
            let less = xs.iter().filter(|&&y| y < x).count() as f64;
            let eq = xs.iter().filter(|&&y| y == x).count() as f64;
            less + (eq + 1.0) / 2.0
        })
        .collect()
}

pub fn spearman_oracle(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (rank_oracle(a), rank_oracle(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

pub fn cos_dist(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
    let na: f64 = a.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    1.0 - dot / (na * nb)
}

/// Minimum inertia over every assignment of points to k non-empty labelled
/// groups (labelled enumeration visits each partition k! times; fine at n ≤ 8).
pub fn exhaustive_optimum(points: &[Vec<f64>], k: usize) -> f64 {
    let n = points.len();
    let dim = points[0].len();
    let mut best = f64::INFINITY;
    let mut assign = vec![0usize; n];
    loop {
        let mut counts = vec![0usize; k];
        for &a in &assign {
            counts[a] += 1;
        }
        if counts.iter().all(|&c| c > 0) {
            let mut sums = vec![vec![0.0; dim]; k];
            for (p, &a) in points.iter().zip(&assign) {
                for d in 0..dim {
                    sums[a][d] += p[d];
                }
            }
            let inertia: f64 = points
                .iter()
                .zip(&assign)
                .map(|(p, &a)| (0..dim).map(|d| (p[d] - sums[a][d] / counts[a] as f64).powi(2)).sum::<f64>())
                .sum();
            best = best.min(inertia);
        }
        // next assignment in base-k counting
        let mut i = 0;
        loop {
            if i == n {
                return best;
            }
            assign[i] += 1;
            if assign[i] < k {
                break;
            }
            assign[i] = 0;
            i += 1;
        }
    }
}

/// Small k-means instance on a half-integer grid (ties and duplicates occur).
pub fn tiny_kmeans_instance(rng: &mut ChaCha8Rng) -> (Vec<EmbeddingVector>, usize) {
    let n = rng.gen_range(2..=8);
    let dim = rng.gen_range(1..=3);
    let k = rng.gen_range(1..=3usize.min(n));
    let pts = (0..n)
        .map(|_| EmbeddingVector::new((0..dim).map(|_| rng.gen_range(-5i32..=5) as f32 / 2.0).collect()).unwrap())
        .collect();
    (pts, k)
}

// ---------------------------------------------------------------- fixtures

/// Records `"doc <i> about subject <t>"` with topic `i % topics` and an
/// unrelated `parity` aspect.
pub fn topic_corpus(n: usize, topics: usize) -> Vec<TextRecord> {
    (0..n)
        .map(|i| {
            let t = i % topics;
            TextRecord::new(format!("d{i:05}"), format!("doc {i} about subject {t}"))
                .with_label("topic", format!("s{t}"))
                .with_label("parity", format!("p{}", (i / topics) % 2))
        })
        .collect()
}

pub fn topic_label(t: &str) -> String {
    format!("Subject {}", t.trim_start_matches('s'))
}

/// Fixture replies keyed by text id: summaries, cluster labels (looked up
/// through the anchor id) and classifications all follow the `topic` aspect.
pub fn topic_fixture(records: &[TextRecord]) -> Vec<FixtureEntry> {
    let mut out = Vec::with_capacity(records.len() * 3);
    for r in records {
        let t = &r.labels["topic"];
        for (kind, response) in [
            (CallKind::Summarize, format!("Summary: subject {t}")),
            (CallKind::GenerateLabel, format!("Category: {}", topic_label(t))),
            (CallKind::Classify, format!("Classification: {}", topic_label(t))),
        ] {
            out.push(FixtureEntry {
                kind,
                key: r.id.clone(),
                response,
            });
        }
    }
    out
}

pub fn write_jsonl<T: serde::Serialize>(path: &Path, items: &[T]) {
    gst_core::corpus::write_jsonl(path, items).unwrap();
}

/// Two independent aspects in a 32-d space: `topic` (4 classes) lives in
/// dims 0–15, `tone` (4 classes) in dims 16–31. Tone means sit farther apart
/// than topic means, so the generic geometry is dominated by tone.
pub struct TwoAspect {
    pub records: Vec<TextRecord>,
    pub vectors: Vec<EmbeddingVector>,
}

pub const TWO_ASPECT_DIM: usize = 32;

pub fn two_aspect_fixture(n: usize, seed: u64) -> TwoAspect {
    let (topic_scale, tone_scale, sigma) = (3.0f32, 5.0f32, 0.5f32);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = rand_distr::Normal::new(0.0f32, sigma).unwrap();
    let mut records = Vec::with_capacity(n);
    let mut vectors = Vec::with_capacity(n);
    for i in 0..n {
        let (a, b) = (rng.gen_range(0..4usize), rng.gen_range(0..4usize));
        let mut v: Vec<f32> = (0..TWO_ASPECT_DIM).map(|_| rng.sample(normal)).collect();
        v[a] += topic_scale;
        v[16 + b] += tone_scale;
        records.push(
            TextRecord::new(format!("r{i:05}"), format!("record {i}: topic t{a}, tone s{b}"))
                .with_label("topic", format!("t{a}"))
                .with_label("tone", format!("s{b}")),
        );
        vectors.push(EmbeddingVector::new(v).unwrap());
    }
    TwoAspect { records, vectors }
}

fn topic_of(s: &str) -> Option<String> {
    let at = s.find("topic t")?;
    let digit = s[at + 7..].chars().next()?;
    Some(format!("t{digit}"))
}

fn section<'a>(prompt: &'a str, start: &str, end: &str) -> &'a str {
    let from = prompt.find(start).map_or(0, |p| p + start.len());
    let to = prompt[from..].find(end).map_or(prompt.len(), |p| from + p);
    &prompt[from..to]
}

fn list_items(s: &str) -> Vec<&str> {
    s.lines().filter_map(|l| l.strip_prefix("- ")).collect()
}

/// A mock LLM that reads the `topic` aspect out of the prompt text.
///
/// Cluster labels name the majority topic of the positives when at least 60%
/// share it, and are `"Mixed topics"` otherwise. A text whose topic has no
/// category is put in an arbitrary (hash-chosen) category.
pub fn topic_reader(request: &LlmRequest) -> Result<String, LlmError> {
    let p = &request.prompt;
    match request.kind {
        CallKind::Summarize => {
            let text = section(p, "Text: ", "\nRequired Format");
            Ok(format!("Summary: topic {}", topic_of(text).unwrap_or_default()))
        }
        CallKind::GenerateLabel => {
            let group = section(p, "Current Group Texts:", "\nOther Group Texts:");
            let mut counts: BTreeMap<String, usize> = BTreeMap::new();
            let items = list_items(group);
            for item in &items {
                if let Some(t) = topic_of(item) {
                    *counts.entry(t).or_default() += 1;
                }
            }
            let (top, n) = counts.into_iter().max_by_key(|(t, n)| (*n, std::cmp::Reverse(t.clone()))).unwrap_or_default();
            if n * 10 >= items.len() * 6 {
                Ok(format!("Category: Topic {top}"))
            } else {
                Ok("Category: Mixed topics".into())
            }
        }
        CallKind::Classify => {
            let cats = list_items(section(p, "Available Categories:", "\nText to Classify:"));
            let text = section(p, "Text to Classify: ", "\nRequired Format");
            let want = topic_of(text).map(|t| format!("Topic {t}"));
            let pick = match want.filter(|w| cats.contains(&w.as_str())) {
                Some(w) => w,
                None => {
                    let h = text.bytes().fold(0u64, |h, b| h.wrapping_mul(31).wrapping_add(u64::from(b)));
                    cats[(h % cats.len() as u64) as usize].to_string()
                }
            };
            Ok(format!("Classification: {pick}"))
        }
    }
}

pub fn topic_reader_gateway() -> LlmGateway {
    LlmGateway::new(Box::new(FnBackend::new(topic_reader)), &LlmProviderConfig::mock()).unwrap()
}
