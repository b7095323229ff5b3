mod common;

use common::naive_loss;
use gst_core::taxonomy::AnnotatedSample;
use gst_core::transform::{
    fda_transform, loss, model_load, train, transform_batch, Optimizer, TrainConfig, TransformError, TransformModel,
};
use gst_core::{DenseMatrix, EmbeddingVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn gradients_match_central_differences() {
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(2..=8);
        let d_in = rng.gen_range(1..=6);
        let d_out = rng.gen_range(1..=6);
        let mut r = |k: usize| (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        let mut params = [r(d_out * d_in), r(d_out), r(d_in * d_out), r(d_in)];
        let x: Vec<Vec<f64>> = (0..n).map(|_| r(d_in)).collect();
        let y: Vec<usize> = (0..n).map(|i| (i * 7 + seed as usize) % 3).collect();
        let (m, beta) = (1.5, (1.0, 0.7));

        let flat_x: Vec<f64> = x.concat();
        let p = loss::Params {
            d_in,
            d_out,
            w_enc: &params[0],
            b_enc: &params[1],
            w_dec: &params[2],
            b_dec: &params[3],
        };
        let (l, g) = loss::loss_gradients(&p, &flat_x, &y, m, beta.0, beta.1);
        let base = naive_loss(&params[0], &params[1], &params[2], &params[3], &x, &y, m, beta);
        assert!((l.total - base).abs() <= 1e-12 * base.max(1.0));

        let analytic = [g.w_enc, g.b_enc, g.w_dec, g.b_dec];
        let h = 1e-4;
        for t in 0..4 {
            for k in 0..params[t].len() {
                let orig = params[t][k];
                params[t][k] = orig + h;
                let up = naive_loss(&params[0], &params[1], &params[2], &params[3], &x, &y, m, beta);
                params[t][k] = orig - h;
                let down = naive_loss(&params[0], &params[1], &params[2], &params[3], &x, &y, m, beta);
                params[t][k] = orig;
                let fd = (up - down) / (2.0 * h);
                let a = analytic[t][k];
                let err = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-3);
                assert!(err < 1e-4, "seed {seed} tensor {t} index {k}: fd {fd} analytic {a}");
            }
        }
    }
}

#[test]
fn total_loss_composition() {
    let w = [1.0, 0.0, 0.0, 1.0];
    let p = loss::Params {
        d_in: 2,
        d_out: 2,
        w_enc: &w,
        b_enc: &[0.0, 0.0],
        w_dec: &w,
        b_dec: &[3.0, 4.0],
    };
    // e = x, x̂ = x + (3, 4): contrastive 4.5, reconstruction 25
    let x = [0.0, 0.0, 0.0, 3.0];
    let both = loss::total_loss(&p, &x, &[0, 0], 1.0, 1.0, 1.0);
    assert_eq!((both.contrastive, both.reconstruction, both.total), (4.5, 25.0, 29.5));
    assert_eq!(loss::total_loss(&p, &x, &[0, 0], 1.0, 0.0, 1.0).total, 25.0);
    assert_eq!(loss::total_loss(&p, &x, &[0, 0], 1.0, 1.0, 0.0).total, 4.5);
}

fn gaussian_groups(n: usize, dim: usize, sep: f32, seed: u64) -> Vec<AnnotatedSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = i % 2;
            let mut v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            v[0] += if label == 0 { -sep } else { sep };
            AnnotatedSample {
                text_id: format!("s{i}"),
                embedding: EmbeddingVector::new(v).unwrap(),
                label_index: label,
            }
        })
        .collect()
}

#[test]
fn autoencoder_alone_learns_identity() {
    let samples = gaussian_groups(200, 6, 0.0, 1);
    let cfg = TrainConfig {
        beta1: 0.0,
        seed: 3,
        ..Default::default()
    };
    let model = train(&samples, &cfg).unwrap();
    let val: Vec<AnnotatedSample> = samples.clone();
    let l = model.evaluate_loss(&val).unwrap();
    assert!(l.reconstruction < 1e-3, "reconstruction {}", l.reconstruction);
}

#[test]
fn training_reduces_contrastive_loss_and_is_deterministic() {
    let samples = gaussian_groups(300, 4, 1.5, 2);
    let cfg = TrainConfig {
        seed: 11,
        learning_rate: 5e-3,
        max_epochs: 60,
        ..Default::default()
    };
    let model = train(&samples, &cfg).unwrap();
    let identity = TransformModel::from_weights(
        DenseMatrix::identity(4).unwrap(),
        vec![0.0; 4],
        DenseMatrix::identity(4).unwrap(),
        vec![0.0; 4],
    )
    .unwrap();
    let before = identity.evaluate_loss(&samples).unwrap().contrastive;
    let after = model.evaluate_loss(&samples).unwrap().contrastive;
    assert!(after < before, "{after} !< {before}");

    let meta = &model.metadata;
    assert!(meta.best_epoch <= meta.epochs_run);
    assert!(meta.final_val_loss.unwrap() <= meta.initial_val_loss.unwrap());
    assert_eq!(meta.train_samples + meta.val_samples, samples.len());

    let again = train(&samples, &cfg).unwrap();
    let bytes = |m: &TransformModel| serde_json::to_vec(m).unwrap();
    assert_eq!(bytes(&model), bytes(&again));
}

#[test]
fn training_contract_errors() {
    let few = gaussian_groups(5, 3, 1.0, 0);
    assert!(matches!(train(&few, &TrainConfig::default()), Err(TransformError::TooFewSamples { .. })));
    let mut one = gaussian_groups(40, 3, 1.0, 0);
    one.iter_mut().for_each(|s| s.label_index = 0);
    assert!(matches!(train(&one, &TrainConfig::default()), Err(TransformError::SingleLabel)));
    let mut huge = gaussian_groups(40, 3, 1.0, 0);
    huge[3].embedding = EmbeddingVector::new(vec![1e30, 1e30, 1e30]).unwrap();
    let sgd = TrainConfig { learning_rate: 1.0, optimizer: Optimizer::Sgd, ..Default::default() };
    let err = train(&huge, &sgd).unwrap_err();
    assert!(matches!(err, TransformError::NonFinite { .. }), "{err}");
}

#[test]
fn hand_written_model_file() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/minimal_model.json");
    let model = model_load(&path).unwrap();
    assert_eq!((model.d_in, model.d_out), (3, 2));
    let x = EmbeddingVector::new(vec![1.0, 2.0, 3.0]).unwrap();
    let want = gst_core::vectorlab::mat_vec(&model.w_enc, &x).unwrap();
    let got = model.encode(&x).unwrap();
    // b_enc = [0.5, -1]
    assert_eq!(got.as_slice(), &[want.as_slice()[0] + 0.5, want.as_slice()[1] - 1.0]);
    assert_eq!(got.as_slice(), &[7.5, 0.0]);
}

#[test]
fn save_load_is_bit_exact_on_probes() {
    let samples = gaussian_groups(60, 5, 1.0, 4);
    let model = train(&samples, &TrainConfig { max_epochs: 5, ..Default::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    model.save(&path).unwrap();
    let back = model_load(&path).unwrap();
    let probes: Vec<_> = gaussian_groups(50, 5, 0.0, 9).into_iter().map(|s| s.embedding).collect();
    assert_eq!(transform_batch(&model, &probes).unwrap(), transform_batch(&back, &probes).unwrap());
    assert_eq!(back, model);
}

fn separation_ratio(proj: &[Vec<f64>], samples: &[AnnotatedSample]) -> f64 {
    // between-class over within-class variance of the projected data
    let y: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| proj.iter().map(|w| w.iter().zip(s.embedding.as_slice()).map(|(a, b)| a * f64::from(*b)).sum()).collect())
        .collect();
    let k = proj.len();
    let classes: std::collections::BTreeSet<usize> = samples.iter().map(|s| s.label_index).collect();
    let mean: Vec<f64> = (0..k).map(|c| y.iter().map(|v| v[c]).sum::<f64>() / y.len() as f64).collect();
    let (mut between, mut within) = (0.0, 0.0);
    for &l in &classes {
        let members: Vec<&Vec<f64>> = y.iter().zip(samples).filter(|(_, s)| s.label_index == l).map(|(v, _)| v).collect();
        let mu: Vec<f64> = (0..k).map(|c| members.iter().map(|v| v[c]).sum::<f64>() / members.len() as f64).collect();
        between += members.len() as f64 * mu.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        within += members.iter().map(|v| v.iter().zip(&mu).map(|(a, b)| (a - b).powi(2)).sum::<f64>()).sum::<f64>();
    }
    between / within
}

#[test]
fn fda_beats_random_projections() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let dim = 6;
    let samples: Vec<AnnotatedSample> = (0..300)
        .map(|i| {
            let label = i % 3;
            let mut v: Vec<f32> = (0..dim).map(|d| rng.gen_range(-1.0..1.0) * (1.0 + d as f32)).collect();
            v[1] += 2.0 * label as f32;
            v[4] -= 1.5 * label as f32;
            AnnotatedSample {
                text_id: i.to_string(),
                embedding: EmbeddingVector::new(v).unwrap(),
                label_index: label,
            }
        })
        .collect();
    let w = fda_transform(&samples, None).unwrap();
    assert_eq!(w.rows(), 2);
    let fda = separation_ratio(&w.to_rows(), &samples);
    for _ in 0..200 {
        let random: Vec<Vec<f64>> = (0..2).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        assert!(fda > separation_ratio(&random, &samples));
    }
}
