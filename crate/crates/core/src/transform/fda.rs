//! Fisher discriminant projection, the ablation baseline for the trained
//! transform.

use std::collections::BTreeMap;

use super::train::{pack, TrainingSample};
use super::{ModelMetadata, TrainConfig, TransformError, TransformKind, TransformModel, MODEL_FORMAT_VERSION};
use crate::linalg::{cholesky, dgemm, lower_inverse, symmetric_eigen};
use crate::vectorlab::DenseMatrix;

/// Top discriminant directions as the rows of a `d_out×d_in` matrix.
///
/// `S_w` is ridge-regularized by `1e-6·tr(S_w)/d`, whitened through its
/// Cholesky factor, and the whitened `S_b` diagonalized. `d_out` defaults to
/// `min(d_in, classes - 1)`, which is also its upper bound.
pub fn fda_transform(samples: &[TrainingSample], d_out: Option<usize>) -> Result<DenseMatrix, TransformError> {
    if samples.is_empty() {
        return Err(TransformError::TooFewSamples { need: 2, got: 0 });
    }
    let d = samples[0].embedding.dim();
    let (x, labels) = pack(samples, d)?;
    let mut classes: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        classes.entry(l).or_default().push(i);
    }
    if classes.len() < 2 {
        return Err(TransformError::SingleLabel);
    }
    let max = d.min(classes.len() - 1);
    let d_out = d_out.unwrap_or(max);
    if d_out == 0 || d_out > max {
        return Err(TransformError::DOutTooLarge { d_out, max });
    }

    let n = samples.len();
    let mut mean = vec![0.0; d];
    for row in x.chunks(d) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v / n as f64);
    }
    let mut centered = vec![0.0; n * d];
    let mut s_b = vec![0.0; d * d];
    for members in classes.values() {
        let mut mu = vec![0.0; d];
        for &i in members {
            mu.iter_mut().zip(&x[i * d..(i + 1) * d]).for_each(|(m, v)| *m += v);
        }
        mu.iter_mut().for_each(|m| *m /= members.len() as f64);
        for &i in members {
            for k in 0..d {
                centered[i * d + k] = x[i * d + k] - mu[k];
            }
        }
        let diff: Vec<f64> = mu.iter().zip(&mean).map(|(a, b)| a - b).collect();
        dgemm(d, 1, d, members.len() as f64, &diff, false, &diff, false, 1.0, &mut s_b);
    }
    let mut s_w = vec![0.0; d * d];
    dgemm(d, n, d, 1.0, &centered, true, &centered, false, 0.0, &mut s_w);

    let trace: f64 = (0..d).map(|i| s_w[i * d + i]).sum();
    let ridge = 1e-6 * trace / d as f64;
    for i in 0..d {
        s_w[i * d + i] += ridge;
    }
    let l = cholesky(&s_w, d).ok_or(TransformError::Singular)?;
    let l_inv = lower_inverse(&l, d);

    // M = L⁻¹ S_b L⁻ᵀ
    let mut t = vec![0.0; d * d];
    dgemm(d, d, d, 1.0, &l_inv, false, &s_b, false, 0.0, &mut t);
    let mut m = vec![0.0; d * d];
    dgemm(d, d, d, 1.0, &t, false, &l_inv, true, 0.0, &mut m);
    for i in 0..d {
        for j in i + 1..d {
            let avg = 0.5 * (m[i * d + j] + m[j * d + i]);
            m[i * d + j] = avg;
            m[j * d + i] = avg;
        }
    }
    let (_, u) = symmetric_eigen(&m, d);

    // directions w = L⁻ᵀu, stacked as rows: W = U·L⁻¹
    let mut w = vec![0.0; d_out * d];
    dgemm(d_out, d, d, 1.0, &u[..d_out * d], false, &l_inv, false, 0.0, &mut w);
    for row in w.chunks_mut(d) {
        // fix the sign so the largest-magnitude component is positive
        let pivot = row
            .iter()
            .copied()
            .max_by(|a, b| a.abs().total_cmp(&b.abs()))
            .unwrap_or(0.0);
        if pivot < 0.0 {
            row.iter_mut().for_each(|v| *v = -*v);
        }
    }
    Ok(DenseMatrix::new(d_out, d, w)?)
}

/// Wraps the FDA projection as a transform model; the decoder is the
/// transposed projection and both biases are zero.
pub fn fda_model(samples: &[TrainingSample], cfg: &TrainConfig) -> Result<TransformModel, TransformError> {
    let w = fda_transform(samples, cfg.d_out)?;
    let (d_out, d_in) = (w.rows(), w.cols());
    let model = TransformModel {
        format_version: MODEL_FORMAT_VERSION,
        kind: TransformKind::Fda,
        d_in,
        d_out,
        margin_m: cfg.margin,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        w_dec: w.transpose(),
        w_enc: w,
        b_enc: vec![0.0; d_out],
        b_dec: vec![0.0; d_in],
        metadata: ModelMetadata {
            seed: cfg.seed,
            train_samples: samples.len(),
            ..Default::default()
        },
    };
    model.validate()?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vectorlab::EmbeddingVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(v: Vec<f32>, label: usize) -> TrainingSample {
        TrainingSample {
            text_id: String::new(),
            embedding: EmbeddingVector::new(v).unwrap(),
            label_index: label,
        }
    }

    #[test]
    fn leading_direction_follows_separating_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = Vec::new();
        for i in 0..400 {
            let label = i % 2;
            let shift = if label == 0 { -3.0 } else { 3.0 };
            s.push(sample(vec![shift + rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)], label));
        }
        let w = fda_transform(&s, None).unwrap();
        assert_eq!((w.rows(), w.cols()), (1, 2));
        let r = w.row(0);
        let cos = r[0].abs() / (r[0] * r[0] + r[1] * r[1]).sqrt();
        assert!(cos > 0.99, "cos = {cos}");
    }

    #[test]
    fn limits_and_errors() {
        let s: Vec<_> = (0..30).map(|i| sample(vec![i as f32, (i * i % 7) as f32, (i % 5) as f32], i % 3)).collect();
        assert_eq!(fda_transform(&s, None).unwrap().rows(), 2);
        assert!(matches!(fda_transform(&s, Some(3)), Err(TransformError::DOutTooLarge { max: 2, .. })));
        let one: Vec<_> = s.iter().cloned().map(|mut x| { x.label_index = 0; x }).collect();
        assert!(matches!(fda_transform(&one, None), Err(TransformError::SingleLabel)));
        // zero within-class scatter cannot be regularized
        let flat: Vec<_> = (0..4).map(|i| sample(vec![(i % 2) as f32, 0.0], i % 2)).collect();
        assert!(matches!(fda_transform(&flat, None), Err(TransformError::Singular)));
    }
}
