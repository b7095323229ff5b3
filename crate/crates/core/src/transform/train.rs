//! Mini-batch training with early stopping on validation loss.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::{debug, info};

use super::loss::{self, LossParts, Params};
use super::{ModelMetadata, TransformError, TransformKind, TransformModel, MODEL_FORMAT_VERSION};
use crate::vectorlab::DenseMatrix;

pub type TrainingSample = crate::taxonomy::AnnotatedSample;

pub const MIN_TRAIN_SAMPLES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Which transformation the pipeline fits.
    pub transform: TransformKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub seed: u64,
    /// Defaults to the input dimension (or `classes - 1` for FDA).
    pub d_out: Option<usize>,
    pub optimizer: Optimizer,
    pub margin: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Half-width of the uniform noise added to the identity initialization.
    pub init_noise: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            transform: TransformKind::Autoencoder,
            learning_rate: 1e-3,
            batch_size: 256,
            max_epochs: 200,
            patience: 10,
            val_fraction: 0.2,
            seed: 0,
            d_out: None,
            optimizer: Optimizer::Adam,
            margin: 1.0,
            beta1: 1.0,
            beta2: 1.0,
            init_noise: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TransformError> {
        let bad = |m: &str| Err(TransformError::Config(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return bad("batch_size, max_epochs and patience must be >= 1");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("val_fraction must be in (0, 1)");
        }
        if self.d_out == Some(0) {
            return bad("d_out must be >= 1");
        }
        if !(self.margin > 0.0) || !(self.beta1 >= 0.0) || !(self.beta2 >= 0.0) {
            return bad("margin must be positive and betas non-negative");
        }
        if !(self.init_noise >= 0.0) {
            return bad("init_noise must be non-negative");
        }
        Ok(())
    }
}

/// Packs samples into a row-major `f64` batch plus labels.
pub(crate) fn pack(samples: &[TrainingSample], d_in: usize) -> Result<(Vec<f64>, Vec<usize>), TransformError> {
    let mut x = Vec::with_capacity(samples.len() * d_in);
    let mut labels = Vec::with_capacity(samples.len());
    for s in samples {
        if s.embedding.dim() != d_in {
            return Err(TransformError::DimMismatch {
                expected: d_in,
                found: s.embedding.dim(),
            });
        }
        x.extend(s.embedding.as_slice().iter().map(|&v| f64::from(v)));
        labels.push(s.label_index);
    }
    Ok((x, labels))
}

/// Splits indices per label so each label with at least two members lands in
/// both partitions. Returns `(train, val)`, each sorted.
pub fn stratified_split(labels: &[usize], val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_label.entry(l).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for members in by_label.values_mut() {
        members.shuffle(&mut rng);
        let n = members.len();
        let mut n_val = (val_fraction * n as f64).round() as usize;
        if n >= 2 {
            n_val = n_val.clamp(1, n - 1);
        } else {
            n_val = 0;
        }
        val.extend_from_slice(&members[..n_val]);
        train.extend_from_slice(&members[n_val..]);
    }
    if val.is_empty() && train.len() >= 2 {
        let last = train.pop().expect("non-empty");
        val.push(last);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Flat parameter vector: `[W_enc | b_enc | W_dec | b_dec]`.
struct Flat {
    d_in: usize,
    d_out: usize,
    theta: Vec<f64>,
}

impl Flat {
    fn offsets(&self) -> [usize; 4] {
        let we = self.d_out * self.d_in;
        [0, we, we + self.d_out, 2 * we + self.d_out]
    }

    fn params(&self) -> Params<'_> {
        let [_, be, wd, bd] = self.offsets();
        Params {
            d_in: self.d_in,
            d_out: self.d_out,
            w_enc: &self.theta[..be],
            b_enc: &self.theta[be..wd],
            w_dec: &self.theta[wd..bd],
            b_dec: &self.theta[bd..],
        }
    }

    fn flatten(g: loss::Gradients) -> Vec<f64> {
        let mut v = g.w_enc;
        v.extend(g.b_enc);
        v.extend(g.w_dec);
        v.extend(g.b_dec);
        v
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn step(&mut self, theta: &mut [f64], g: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (((p, g), m), v) in theta.iter_mut().zip(g).zip(&mut self.m).zip(&mut self.v) {
            *m = Self::B1 * *m + (1.0 - Self::B1) * g;
            *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
    }
}

fn check_finite(loss: LossParts, epoch: usize, batch: usize) -> Result<(), TransformError> {
    if loss.total.is_finite() && loss.contrastive.is_finite() && loss.reconstruction.is_finite() {
        Ok(())
    } else {
        Err(TransformError::NonFinite { epoch, batch, loss })
    }
}

/// Fits the encoder/decoder on labelled generic embeddings.
///
/// The returned model is the snapshot with the lowest validation loss.
pub fn train(samples: &[TrainingSample], cfg: &TrainConfig) -> Result<TransformModel, TransformError> {
    cfg.validate()?;
    if samples.len() < MIN_TRAIN_SAMPLES {
        return Err(TransformError::TooFewSamples {
            need: MIN_TRAIN_SAMPLES,
            got: samples.len(),
        });
    }
    let d_in = samples[0].embedding.dim();
    let d_out = cfg.d_out.unwrap_or(d_in);
    let (x_all, labels_all) = pack(samples, d_in)?;
    let first = labels_all[0];
    if labels_all.iter().all(|&l| l == first) {
        return Err(TransformError::SingleLabel);
    }

    let (train_idx, val_idx) = stratified_split(&labels_all, cfg.val_fraction, cfg.seed);
    let gather = |idx: &[usize]| -> (Vec<f64>, Vec<usize>) {
        let mut x = Vec::with_capacity(idx.len() * d_in);
        for &i in idx {
            x.extend_from_slice(&x_all[i * d_in..(i + 1) * d_in]);
        }
        (x, idx.iter().map(|&i| labels_all[i]).collect())
    };
    let (x_val, y_val) = gather(&val_idx);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut noisy_eye = |rows: usize, cols: usize| -> Vec<f64> {
        let mut m = DenseMatrix::eye(rows, cols).expect("non-empty").as_slice().to_vec();
        if cfg.init_noise > 0.0 {
            m.iter_mut().for_each(|v| *v += rng.gen_range(-cfg.init_noise..cfg.init_noise));
        }
        m
    };
    let mut theta = noisy_eye(d_out, d_in);
    theta.extend(std::iter::repeat_n(0.0, d_out));
    theta.extend(noisy_eye(d_in, d_out));
    theta.extend(std::iter::repeat_n(0.0, d_in));
    let mut flat = Flat { d_in, d_out, theta };
    let n_params = flat.theta.len();
    let mut adam = Adam {
        m: vec![0.0; n_params],
        v: vec![0.0; n_params],
        t: 0,
    };

    let val_loss = |flat: &Flat| loss::total_loss(&flat.params(), &x_val, &y_val, cfg.margin, cfg.beta1, cfg.beta2);
    let initial = val_loss(&flat);
    check_finite(initial, 0, 0)?;
    let mut best = (initial.total, flat.theta.clone(), 0usize, None::<f64>);
    let mut since_best = 0;
    let mut epochs_run = 0;
    let mut order = train_idx.clone();

    for epoch in 1..=cfg.max_epochs {
        epochs_run = epoch;
        order.shuffle(&mut rng);
        let mut train_sum = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = gather(batch);
            let (l, g) = loss::loss_gradients(&flat.params(), &x, &y, cfg.margin, cfg.beta1, cfg.beta2);
            check_finite(l, epoch, b)?;
            train_sum += l.total * batch.len() as f64;
            let g = Flat::flatten(g);
            match cfg.optimizer {
                Optimizer::Adam => adam.step(&mut flat.theta, &g, cfg.learning_rate),
                Optimizer::Sgd => flat
                    .theta
                    .iter_mut()
                    .zip(&g)
                    .for_each(|(p, g)| *p -= cfg.learning_rate * g),
            }
        }
        let train_loss = train_sum / order.len() as f64;
        let v = val_loss(&flat);
        check_finite(v, epoch, usize::MAX)?;
        debug!(epoch, train_loss, val_loss = v.total, "epoch done");
        if v.total < best.0 {
            best = (v.total, flat.theta.clone(), epoch, Some(train_loss));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let (best_val, theta, best_epoch, best_train) = best;
    info!(epochs_run, best_epoch, best_val, "training finished");
    flat.theta = theta;
    let p = flat.params();
    let model = TransformModel {
        format_version: MODEL_FORMAT_VERSION,
        kind: TransformKind::Autoencoder,
        d_in,
        d_out,
        margin_m: cfg.margin,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        w_enc: DenseMatrix::new(d_out, d_in, p.w_enc.to_vec())?,
        b_enc: p.b_enc.to_vec(),
        w_dec: DenseMatrix::new(d_in, d_out, p.w_dec.to_vec())?,
        b_dec: p.b_dec.to_vec(),
        metadata: ModelMetadata {
            taxonomy_hash: None,
            seed: cfg.seed,
            epochs_run,
            best_epoch,
            train_samples: train_idx.len(),
            val_samples: val_idx.len(),
            initial_val_loss: Some(initial.total),
            final_train_loss: best_train,
            final_val_loss: Some(best_val),
        },
    };
    model.validate()?;
    Ok(model)
}
