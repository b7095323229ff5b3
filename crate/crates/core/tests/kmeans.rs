mod common;

use common::{exhaustive_optimum, tiny_kmeans_instance};
use gst_core::taxonomy::{kmeans_pp, DEFAULT_MAX_ITERS};
use gst_core::EmbeddingVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn four_point_example_matches_enumeration() {
    let raw = [[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]];
    let pts: Vec<EmbeddingVector> = raw.iter().map(|p| EmbeddingVector::new(p.to_vec()).unwrap()).collect();
    let opt = exhaustive_optimum(&raw.iter().map(|p| p.iter().map(|&v| f64::from(v)).collect()).collect::<Vec<_>>(), 2);
    assert_eq!(opt, 1.0);
    let r = kmeans_pp(&pts, 2, 0, DEFAULT_MAX_ITERS).unwrap();
    assert_eq!(r.inertia, 1.0);
}

#[test]
fn best_of_twenty_restarts_reaches_global_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for case in 0..200 {
        let (pts, k) = tiny_kmeans_instance(&mut rng);
        let raw: Vec<Vec<f64>> = pts.iter().map(EmbeddingVector::to_f64).collect();
        let opt = exhaustive_optimum(&raw, k);
        let best = (0..20)
            .map(|s| kmeans_pp(&pts, k, s, DEFAULT_MAX_ITERS).unwrap().inertia)
            .fold(f64::INFINITY, f64::min);
        assert!((best - opt).abs() <= 1e-9 * opt.max(1.0), "case {case}: {best} vs {opt}");
    }
}

#[test]
fn inertia_never_increases() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..200 {
        let n = rng.gen_range(5..60);
        let dim = rng.gen_range(1..6);
        let k = rng.gen_range(1..=5.min(n));
        let pts: Vec<EmbeddingVector> = (0..n)
            .map(|_| EmbeddingVector::new((0..dim).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap())
            .collect();
        let r = kmeans_pp(&pts, k, rng.gen(), DEFAULT_MAX_ITERS).unwrap();
        for w in r.inertia_trace.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12, "{:?}", r.inertia_trace);
        }
        assert_eq!(r.assignments.len(), n);
    }
}

