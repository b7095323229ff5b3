//! Linear encoder/decoder that maps generic embeddings into an
//! instruction-aligned space.

mod fda;
pub mod loss;
mod train;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::sgemm_abt;
use crate::vectorlab::{DenseMatrix, EmbeddingVector, VectorError};

pub use fda::{fda_model, fda_transform};
pub use loss::{contrastive_loss, reconstruction_loss, Gradients, LossParts};
pub use train::{stratified_split, train, Optimizer, TrainConfig, TrainingSample};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Rows per `transform_batch` kernel call.
pub const TRANSFORM_CHUNK: usize = 256;

#[derive(Debug, Error)]
pub enum TransformError {
    #[error("expected dimension {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("unsupported model format version {0}")]
    Version(u32),
    #[error("inconsistent model: {0}")]
    Shape(String),
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("training needs at least 2 distinct labels")]
    SingleLabel,
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {loss:?}")]
    NonFinite { epoch: usize, batch: usize, loss: LossParts },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("within-class scatter is singular even after regularization")]
    Singular,
    #[error("d_out = {d_out} exceeds the limit {max} (min(d_in, classes - 1))")]
    DOutTooLarge { d_out: usize, max: usize },
    #[error(transparent)]
    Vector(#[from] VectorError),
    #[error("model file {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("model file {path}: {source}")]
    Json { path: String, source: serde_json::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    Autoencoder,
    Fda,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    /// SHA-256 of the taxonomy file the training labels came from.
    pub taxonomy_hash: Option<String>,
    pub seed: u64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    pub initial_val_loss: Option<f64>,
    pub final_train_loss: Option<f64>,
    pub final_val_loss: Option<f64>,
}

/// Serializes a matrix as nested row arrays.
mod nested {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::vectorlab::DenseMatrix;

    pub fn serialize<S: Serializer>(m: &DenseMatrix, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<&[f64]> = (0..m.rows()).map(|r| m.row(r)).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DenseMatrix, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        DenseMatrix::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformModel {
    pub format_version: u32,
    pub kind: TransformKind,
    pub d_in: usize,
    pub d_out: usize,
    pub margin_m: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// `d_out×d_in`
    #[serde(rename = "W_enc", with = "nested")]
    pub w_enc: DenseMatrix,
    pub b_enc: Vec<f64>,
    /// `d_in×d_out`
    #[serde(rename = "W_dec", with = "nested")]
    pub w_dec: DenseMatrix,
    pub b_dec: Vec<f64>,
    pub metadata: ModelMetadata,
}

impl TransformModel {
    /// A model from explicit weights; hyperparameters get their defaults.
    pub fn from_weights(
        w_enc: DenseMatrix,
        b_enc: Vec<f64>,
        w_dec: DenseMatrix,
        b_dec: Vec<f64>,
    ) -> Result<Self, TransformError> {
        let m = Self {
            format_version: MODEL_FORMAT_VERSION,
            kind: TransformKind::Autoencoder,
            d_in: w_enc.cols(),
            d_out: w_enc.rows(),
            margin_m: 1.0,
            beta1: 1.0,
            beta2: 1.0,
            w_enc,
            b_enc,
            w_dec,
            b_dec,
            metadata: ModelMetadata::default(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), TransformError> {
        if self.format_version != MODEL_FORMAT_VERSION {
            return Err(TransformError::Version(self.format_version));
        }
        let shape = |m: String| Err(TransformError::Shape(m));
        if self.d_in == 0 || self.d_out == 0 {
            return shape("dimensions must be >= 1".into());
        }
        if (self.w_enc.rows(), self.w_enc.cols()) != (self.d_out, self.d_in) {
            return shape(format!(
                "W_enc is {}x{}, expected {}x{}",
                self.w_enc.rows(),
                self.w_enc.cols(),
                self.d_out,
                self.d_in
            ));
        }
        if (self.w_dec.rows(), self.w_dec.cols()) != (self.d_in, self.d_out) {
            return shape(format!(
                "W_dec is {}x{}, expected {}x{}",
                self.w_dec.rows(),
                self.w_dec.cols(),
                self.d_in,
                self.d_out
            ));
        }
        if self.b_enc.len() != self.d_out || self.b_dec.len() != self.d_in {
            return shape("bias lengths do not match dimensions".into());
        }
        let finite = self.w_enc.is_finite()
            && self.w_dec.is_finite()
            && self.b_enc.iter().chain(&self.b_dec).all(|v| v.is_finite());
        if !finite {
            return shape("non-finite parameter".into());
        }
        if !(self.margin_m > 0.0) || self.beta1 < 0.0 || self.beta2 < 0.0 {
            return shape("margin must be positive and betas non-negative".into());
        }
        Ok(())
    }

    pub(crate) fn params(&self) -> loss::Params<'_> {
        loss::Params {
            d_in: self.d_in,
            d_out: self.d_out,
            w_enc: self.w_enc.as_slice(),
            b_enc: &self.b_enc,
            w_dec: self.w_dec.as_slice(),
            b_dec: &self.b_dec,
        }
    }

    /// Single-precision copy of the encoder, for bulk transformation.
    pub fn encoder(&self) -> Encoder {
        Encoder {
            d_in: self.d_in,
            d_out: self.d_out,
            w: self.w_enc.as_slice().iter().map(|&v| v as f32).collect(),
            b: self.b_enc.iter().map(|&v| v as f32).collect(),
        }
    }

    /// `e = W_enc·x + b_enc`.
    pub fn encode(&self, x: &EmbeddingVector) -> Result<EmbeddingVector, TransformError> {
        let mut out = self.encoder().apply(std::slice::from_ref(x))?;
        Ok(out.pop().expect("one output per input"))
    }

    /// `x̂ = W_dec·e + b_dec`, evaluated in `f64`.
    pub fn decode(&self, e: &EmbeddingVector) -> Result<EmbeddingVector, TransformError> {
        if e.dim() != self.d_out {
            return Err(TransformError::DimMismatch {
                expected: self.d_out,
                found: e.dim(),
            });
        }
        let mut y = self.w_dec.apply(&e.to_f64())?;
        y.iter_mut().zip(&self.b_dec).for_each(|(v, b)| *v += b);
        Ok(EmbeddingVector::from_f64(&y)?)
    }

    /// Loss parts on a labelled set, in one batch.
    pub fn evaluate_loss(&self, samples: &[TrainingSample]) -> Result<LossParts, TransformError> {
        let (x, labels) = train::pack(samples, self.d_in)?;
        Ok(loss::total_loss(&self.params(), &x, &labels, self.margin_m, self.beta1, self.beta2))
    }

    pub fn save(&self, path: &Path) -> Result<(), TransformError> {
        self.validate()?;
        let mut text = serde_json::to_string_pretty(self).map_err(|source| TransformError::Json {
            path: path.display().to_string(),
            source,
        })?;
        text.push('\n');
        crate::corpus::write_atomic(path, text.as_bytes()).map_err(|source| TransformError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TransformError> {
        let io = |source| TransformError::Io {
            path: path.display().to_string(),
            source,
        };
        let text = fs::read_to_string(path).map_err(io)?;
        let model: Self = serde_json::from_str(&text).map_err(|source| TransformError::Json {
            path: path.display().to_string(),
            source,
        })?;
        model.validate()?;
        Ok(model)
    }
}

/// Encoder weights prepared for `f32` matrix products.
///
/// Every input row goes through the same kernel with the same reduction
/// order, so results do not depend on how inputs are split into chunks.
#[derive(Debug, Clone)]
pub struct Encoder {
    d_in: usize,
    d_out: usize,
    w: Vec<f32>,
    b: Vec<f32>,
}

impl Encoder {
    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn apply(&self, xs: &[EmbeddingVector]) -> Result<Vec<EmbeddingVector>, TransformError> {
        if let Some(x) = xs.iter().find(|x| x.dim() != self.d_in) {
            return Err(TransformError::DimMismatch {
                expected: self.d_in,
                found: x.dim(),
            });
        }
        let mut out = Vec::with_capacity(xs.len());
        let mut a = Vec::with_capacity(TRANSFORM_CHUNK.min(xs.len()) * self.d_in);
        let mut c = vec![0f32; TRANSFORM_CHUNK * self.d_out];
        for chunk in xs.chunks(TRANSFORM_CHUNK) {
            a.clear();
            for x in chunk {
                a.extend_from_slice(x.as_slice());
            }
            let m = chunk.len();
            let c = &mut c[..m * self.d_out];
            sgemm_abt(m, self.d_in, self.d_out, &a, &self.w, c);
            for row in c.chunks(self.d_out) {
                let v: Vec<f32> = row.iter().zip(&self.b).map(|(y, b)| y + b).collect();
                out.push(EmbeddingVector::new(v)?);
            }
        }
        Ok(out)
    }
}

/// Encodes every vector, preserving order. Makes no network calls.
pub fn transform_batch(
    model: &TransformModel,
    vectors: &[EmbeddingVector],
) -> Result<Vec<EmbeddingVector>, TransformError> {
    model.encoder().apply(vectors)
}

pub fn model_save(model: &TransformModel, path: &Path) -> Result<(), TransformError> {
    model.save(path)
}

pub fn model_load(path: &Path) -> Result<TransformModel, TransformError> {
    TransformModel::load(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ev(v: &[f32]) -> EmbeddingVector {
        EmbeddingVector::new(v.to_vec()).unwrap()
    }

    fn linear(w: DenseMatrix, b: Vec<f64>) -> TransformModel {
        let d_in = w.cols();
        let d_out = w.rows();
        TransformModel::from_weights(w, b, DenseMatrix::eye(d_in, d_out).unwrap(), vec![0.0; d_in]).unwrap()
    }

    #[test]
    fn encode_examples() {
        let id = linear(DenseMatrix::identity(2).unwrap(), vec![0.0, 0.0]);
        assert_eq!(id.encode(&ev(&[0.25, -7.0])).unwrap(), ev(&[0.25, -7.0]));
        let two = linear(DenseMatrix::new(2, 2, vec![2.0, 0.0, 0.0, 2.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(two.encode(&ev(&[1.0, -1.0])).unwrap(), ev(&[2.0, -2.0]));
        let zero = linear(DenseMatrix::zeros(2, 2).unwrap(), vec![5.0, 5.0]);
        assert_eq!(zero.encode(&ev(&[3.0, 9.0])).unwrap(), ev(&[5.0, 5.0]));
        assert!(matches!(id.encode(&ev(&[1.0])), Err(TransformError::DimMismatch { .. })));
    }

    #[test]
    fn decode_examples() {
        let mk = |w: DenseMatrix, b: Vec<f64>| {
            TransformModel::from_weights(DenseMatrix::identity(2).unwrap(), vec![0.0; 2], w, b).unwrap()
        };
        let id = mk(DenseMatrix::identity(2).unwrap(), vec![0.0, 0.0]);
        assert_eq!(id.decode(&ev(&[0.5, 4.0])).unwrap(), ev(&[0.5, 4.0]));
        let two = mk(DenseMatrix::new(2, 2, vec![2.0, 0.0, 0.0, 2.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(two.decode(&ev(&[1.0, -1.0])).unwrap(), ev(&[2.0, -2.0]));
        let zero = mk(DenseMatrix::zeros(2, 2).unwrap(), vec![5.0, 5.0]);
        assert_eq!(zero.decode(&ev(&[3.0, 9.0])).unwrap(), ev(&[5.0, 5.0]));
    }

    fn random_model(d_in: usize, d_out: usize, seed: u64) -> TransformModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut r = |n: usize| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        TransformModel::from_weights(
            DenseMatrix::new(d_out, d_in, r(d_out * d_in)).unwrap(),
            r(d_out),
            DenseMatrix::new(d_in, d_out, r(d_in * d_out)).unwrap(),
            r(d_in),
        )
        .unwrap()
    }

    #[test]
    fn batch_is_partition_independent() {
        let model = random_model(37, 19, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xs: Vec<EmbeddingVector> = (0..700)
            .map(|_| EmbeddingVector::new((0..37).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap())
            .collect();
        let all = transform_batch(&model, &xs).unwrap();
        assert_eq!(all.len(), xs.len());
        for (i, x) in xs.iter().enumerate().step_by(13) {
            assert_eq!(model.encode(x).unwrap(), all[i]);
        }
        let mut pieces = Vec::new();
        for part in xs.chunks(97) {
            pieces.extend(transform_batch(&model, part).unwrap());
        }
        assert_eq!(pieces, all);
        assert!(transform_batch(&model, &[]).unwrap().is_empty());
    }

    #[test]
    fn encode_agrees_with_f64_product() {
        let model = random_model(20, 8, 1);
        let x = EmbeddingVector::new((0..20).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
        let mut want = model.w_enc.apply(&x.to_f64()).unwrap();
        want.iter_mut().zip(&model.b_enc).for_each(|(v, b)| *v += b);
        let got = model.encode(&x).unwrap();
        for (g, w) in got.as_slice().iter().zip(want) {
            assert!((f64::from(*g) - w).abs() < 1e-5);
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let mut model = random_model(6, 4, 2);
        model.metadata.seed = 77;
        model.metadata.final_val_loss = Some(0.1 + 0.2);
        model.save(&path).unwrap();
        let back = TransformModel::load(&path).unwrap();
        assert_eq!(back, model);
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"W_enc\""));
        assert!(text.contains("0.30000000000000004"));

        fs::write(&path, &text[..text.len() / 2]).unwrap();
        assert!(matches!(TransformModel::load(&path), Err(TransformError::Json { .. })));
        fs::write(&path, text.replace("\"format_version\": 1", "\"format_version\": 9")).unwrap();
        assert!(matches!(TransformModel::load(&path), Err(TransformError::Version(9))));
        fs::write(&path, text.replace("\"d_out\": 4", "\"d_out\": 3")).unwrap();
        assert!(matches!(TransformModel::load(&path), Err(TransformError::Shape(_))));
    }
}
