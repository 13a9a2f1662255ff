//! A point-wise MLP classifier with hand-written backpropagation.
//!
//! `features → tanh(64) → tanh(64) → tanh(32) = embedding → linear → logits`,
//! plus the projection head and prototype bank used by the contrastive loss.

mod features;
mod train;

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::losses::{PrototypeBank, Projection};
use crate::{ClassId, Error, Result};

pub use features::{compute_features, FeatureConfig, FeatureInput, FEATURE_NAMES, NUM_FEATURES};
pub use train::{
    distill, evaluate, fit, train, CheckpointSidecar, EpochRecord, EvalSet, FitOptions, Schedule, TrainConfig,
    TrainFrame,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub embedding: usize,
    pub projection: usize,
    /// Prototype moving-average momentum.
    pub momentum: f64,
    /// Prototype softmax temperature.
    pub temperature: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            embedding: 32,
            projection: 16,
            momentum: 0.99,
            temperature: 0.1,
        }
    }
}

/// Trainable weights. Biases are `1 × n` rows so every parameter is a matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
    pub w3: Array2<f64>,
    pub b3: Array2<f64>,
    pub wc: Array2<f64>,
    pub bc: Array2<f64>,
    /// Projection head, `projection × embedding`.
    pub proj: Array2<f64>,
}

impl Params {
    pub fn arrays(&self) -> [&Array2<f64>; 9] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3, &self.wc, &self.bc, &self.proj]
    }

    pub fn arrays_mut(&mut self) -> [&mut Array2<f64>; 9] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
            &mut self.wc,
            &mut self.bc,
            &mut self.proj,
        ]
    }

    pub fn zeros_like(&self) -> Self {
        let z = |a: &Array2<f64>| Array2::zeros(a.dim());
        Self {
            w1: z(&self.w1),
            b1: z(&self.b1),
            w2: z(&self.w2),
            b2: z(&self.b2),
            w3: z(&self.w3),
            b3: z(&self.b3),
            wc: z(&self.wc),
            bc: z(&self.bc),
            proj: z(&self.proj),
        }
    }

    pub fn norm(&self) -> f64 {
        self.arrays().iter().map(|a| a.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.arrays().iter().all(|a| a.iter().all(|v| v.is_finite()))
    }
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// Normalized input.
    pub input: Array2<f64>,
    pub h1: Array2<f64>,
    pub h2: Array2<f64>,
    pub embedding: Array2<f64>,
    pub logits: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub config: ModelConfig,
    pub num_features: usize,
    pub num_classes: usize,
    /// Input standardization; features are mapped to `(x − mean) / std`.
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub params: Params,
    pub bank: PrototypeBank,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let v: f64 = StandardNormal.sample(rng);
        v * scale
    })
}

impl ToyModel {
    pub fn new(num_features: usize, num_classes: usize, config: ModelConfig, seed: u64) -> Result<Self> {
        if num_features == 0 || num_classes < 2 || config.hidden == 0 || config.embedding == 0 || config.projection == 0 {
            return Err(Error::Argument(format!(
                "invalid model shape: {num_features} features, {num_classes} classes, {config:?}"
            )));
        }
        if !(0.0..=1.0).contains(&config.momentum) || !(config.temperature > 0.0) {
            return Err(Error::Argument(format!("invalid prototype settings: {config:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, d, p) = (config.hidden, config.embedding, config.projection);
        let fan = |n: usize| (1.0 / n as f64).sqrt();
        let params = Params {
            w1: gaussian(&mut rng, h, num_features, fan(num_features)),
            b1: Array2::zeros((1, h)),
            w2: gaussian(&mut rng, h, h, fan(h)),
            b2: Array2::zeros((1, h)),
            w3: gaussian(&mut rng, d, h, fan(h)),
            b3: Array2::zeros((1, d)),
            wc: gaussian(&mut rng, num_classes, d, fan(d)),
            bc: Array2::zeros((1, num_classes)),
            proj: Projection::new(d, p, crate::stream_seed(seed, 1)).weight,
        };
        let bank = PrototypeBank::new(num_classes, p, config.momentum, config.temperature, crate::stream_seed(seed, 2));
        Ok(Self {
            config,
            num_features,
            num_classes,
            input_mean: vec![0.0; num_features],
            input_std: vec![1.0; num_features],
            params,
            bank,
        })
    }

    /// Sets the input standardization from sample rows; constant columns keep
    /// a unit scale.
    pub fn fit_normalization(&mut self, samples: ArrayView2<f64>) {
        let n = samples.nrows().max(1) as f64;
        for j in 0..self.num_features {
            let col = samples.column(j);
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            self.input_mean[j] = mean;
            self.input_std[j] = if var > 1e-12 { var.sqrt() } else { 1.0 };
        }
    }

    pub fn projection(&self) -> Projection {
        Projection {
            weight: self.params.proj.clone(),
        }
    }

    pub fn forward(&self, features: ArrayView2<f64>) -> Result<Forward> {
        if features.ncols() != self.num_features {
            return Err(Error::Argument(format!(
                "model expects {} features, got {}",
                self.num_features,
                features.ncols()
            )));
        }
        let mut input = features.to_owned();
        for (mut col, (&m, &s)) in input.columns_mut().into_iter().zip(self.input_mean.iter().zip(&self.input_std)) {
            col.mapv_inplace(|v| (v - m) / s);
        }
        let p = &self.params;
        let h1 = (input.dot(&p.w1.t()) + &p.b1).mapv_into(f64::tanh);
        let h2 = (h1.dot(&p.w2.t()) + &p.b2).mapv_into(f64::tanh);
        let embedding = (h2.dot(&p.w3.t()) + &p.b3).mapv_into(f64::tanh);
        let logits = embedding.dot(&p.wc.t()) + &p.bc;
        Ok(Forward {
            input,
            h1,
            h2,
            embedding,
            logits,
        })
    }

    /// Parameter gradients given the gradients of the loss with respect to the
    /// logits, the embedding (from the contrastive term) and the projection head.
    pub fn backward(
        &self,
        fwd: &Forward,
        grad_logits: ArrayView2<f64>,
        grad_embedding: ArrayView2<f64>,
        grad_projection: ArrayView2<f64>,
    ) -> Params {
        let p = &self.params;
        let tanh_back = |g: Array2<f64>, h: &Array2<f64>| {
            let mut g = g;
            Zip::from(&mut g).and(h).for_each(|g, &h| *g *= 1.0 - h * h);
            g
        };
        let sum_rows = |g: &Array2<f64>| g.sum_axis(Axis(0)).insert_axis(Axis(0));
        let g_emb = grad_logits.dot(&p.wc) + grad_embedding;
        let g_a3 = tanh_back(g_emb, &fwd.embedding);
        let g_a2 = tanh_back(g_a3.dot(&p.w3), &fwd.h2);
        let g_a1 = tanh_back(g_a2.dot(&p.w2), &fwd.h1);
        Params {
            wc: grad_logits.t().dot(&fwd.embedding),
            bc: grad_logits.sum_axis(Axis(0)).insert_axis(Axis(0)),
            w3: g_a3.t().dot(&fwd.h2),
            b3: sum_rows(&g_a3),
            w2: g_a2.t().dot(&fwd.h1),
            b2: sum_rows(&g_a2),
            w1: g_a1.t().dot(&fwd.input),
            b1: sum_rows(&g_a1),
            proj: grad_projection.to_owned(),
        }
    }

    /// Logits for many rows, evaluated in parallel chunks.
    pub fn logits(&self, features: ArrayView2<f64>) -> Result<Array2<f64>> {
        const CHUNK: usize = 4096;
        let n = features.nrows();
        let chunks: Vec<Array2<f64>> = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let rows = features.slice(ndarray::s![c * CHUNK..((c + 1) * CHUNK).min(n), ..]);
                self.forward(rows).map(|f| f.logits)
            })
            .collect::<Result<_>>()?;
        let views: Vec<_> = chunks.iter().map(|c| c.view()).collect();
        if views.is_empty() {
            return Ok(Array2::zeros((0, self.num_classes)));
        }
        Ok(ndarray::concatenate(Axis(0), &views).expect("chunks share the class dimension"))
    }

    pub fn predict(&self, features: ArrayView2<f64>) -> Result<Vec<ClassId>> {
        Ok(argmax_rows(self.logits(features)?.view()))
    }

    /// Binary checkpoint: magic, version, dimensions, then little-endian
    /// `f32` arrays in row-major order (normalization, weights, biases,
    /// projection, prototypes) and the prototype momentum and temperature.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        let dims = [
            CHECKPOINT_VERSION,
            self.num_features as u32,
            self.config.hidden as u32,
            self.config.embedding as u32,
            self.config.projection as u32,
            self.num_classes as u32,
        ];
        dims.iter().for_each(|d| out.extend_from_slice(&d.to_le_bytes()));
        let mut put = |vals: &mut dyn Iterator<Item = f64>| {
            for v in vals {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        };
        put(&mut self.input_mean.iter().copied());
        put(&mut self.input_std.iter().copied());
        for a in self.params.arrays() {
            put(&mut a.iter().copied());
        }
        put(&mut self.bank.prototypes.iter().flatten().copied());
        put(&mut [self.bank.momentum, self.bank.temperature].into_iter());
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let fail = |offset: usize, message: String| Error::Format {
            path: path.to_path_buf(),
            offset: offset as u64,
            message,
        };
        if bytes.len() < 32 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(fail(0, "not a model checkpoint".into()));
        }
        let word = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
        let version = word(8);
        if version != CHECKPOINT_VERSION {
            return Err(fail(8, format!("unsupported checkpoint version {version}")));
        }
        let [f, h, d, p, c] = [12, 16, 20, 24, 28].map(|i| word(i) as usize);
        let config = ModelConfig {
            hidden: h,
            embedding: d,
            projection: p,
            ..Default::default()
        };
        let mut model = Self::new(f, c, config, 0).map_err(|e| fail(12, e.to_string()))?;
        let floats = 2 * f + h * f + h + h * h + h + d * h + d + c * d + c + p * d + c * p + 2;
        let expected = 32 + 4 * floats;
        if bytes.len() != expected {
            return Err(fail(bytes.len().min(expected), format!("expected {expected} bytes, found {}", bytes.len())));
        }
        let mut vals = bytes[32..]
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])));
        let mut take = |n: usize| -> Vec<f64> { vals.by_ref().take(n).collect() };
        model.input_mean = take(f);
        model.input_std = take(f);
        for a in model.params.arrays_mut() {
            let n = a.len();
            *a = Array2::from_shape_vec(a.dim(), take(n)).expect("size checked above");
        }
        model.bank.prototypes = (0..c).map(|_| take(p)).collect();
        let tail = take(2);
        model.bank.momentum = tail[0];
        model.bank.temperature = tail[1];
        model.config.momentum = tail[0];
        model.config.temperature = tail[1];
        Ok(model)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"LESSTOY\0";
const CHECKPOINT_VERSION: u32 = 1;

/// Index of the largest entry per row; ties go to the lower class.
pub fn argmax_rows(logits: ArrayView2<f64>) -> Vec<ClassId> {
    logits
        .rows()
        .into_iter()
        .map(|r| {
            let mut best = 0;
            for (k, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = k;
                }
            }
            best as ClassId
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{joint_loss, Batch, ClassWeightSet, LossConfig};
    use crate::UNLABELED;
    use rand::Rng;

    fn small_model(seed: u64) -> ToyModel {
        let config = ModelConfig {
            hidden: 7,
            embedding: 5,
            projection: 4,
            ..Default::default()
        };
        let mut m = ToyModel::new(6, 3, config, seed).unwrap();
        m.input_mean = vec![0.1, -0.2, 0.0, 0.3, 0.0, 0.5];
        m.input_std = vec![1.5, 0.7, 1.0, 2.0, 1.0, 0.9];
        m
    }

    #[test]
    fn end_to_end_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut model = small_model(3);
        let x = Array2::from_shape_simple_fn((8, 6), || rng.random_range(-2.0..2.0));
        let teacher = Array2::from_shape_simple_fn((8, 3), || rng.random_range(-2.0..2.0));
        let sparse = [0, UNLABELED, UNLABELED, 2, UNLABELED, UNLABELED, 1, UNLABELED];
        let propagated = [UNLABELED, 0, 0, UNLABELED, 1, UNLABELED, UNLABELED, 2];
        let weak = [0b001, 0b001, 0b011, 0b110, 0b010, 0, 0b011, 0b100];
        let weights = ClassWeightSet {
            sparse: vec![1.0, 0.5, 1.5],
            propagated: vec![0.7, 1.3, 1.0],
            proto: vec![1.2, 0.9, 1.0],
        };
        let config = LossConfig {
            distill_temperature: Some(4.0),
            ..Default::default()
        };
        let loss = |m: &ToyModel| {
            let f = m.forward(x.view()).unwrap();
            let batch = Batch {
                logits: f.logits.view(),
                embeddings: f.embedding.view(),
                sparse: &sparse,
                propagated: &propagated,
                weak: &weak,
                teacher_logits: Some(teacher.view()),
            };
            joint_loss(&batch, &m.bank, &m.projection(), &weights, &config).unwrap()
        };
        let f = model.forward(x.view()).unwrap();
        let j = loss(&model);
        let grads = model.backward(&f, j.grad_logits.view(), j.grad_embeddings.view(), j.grad_projection.view());
        let scale = grads.norm();
        let h = 1e-5;
        let mut worst = 0.0_f64;
        for a in 0..9 {
            let len = grads.arrays()[a].len();
            for idx in 0..len {
                let orig = model.params.arrays()[a].as_slice().unwrap()[idx];
                model.params.arrays_mut()[a].as_slice_mut().unwrap()[idx] = orig + h;
                let fp = loss(&model).parts.total();
                model.params.arrays_mut()[a].as_slice_mut().unwrap()[idx] = orig - h;
                let fm = loss(&model).parts.total();
                model.params.arrays_mut()[a].as_slice_mut().unwrap()[idx] = orig;
                let g = grads.arrays()[a].as_slice().unwrap()[idx];
                worst = worst.max(((fp - fm) / (2.0 * h) - g).abs() / scale);
            }
        }
        assert!(worst < 1e-6, "{worst}");
    }

    #[test]
    fn checkpoint_round_trip_is_f32_exact() {
        let mut model = small_model(5);
        for a in model.params.arrays_mut() {
            a.mapv_inplace(|v| f64::from(v as f32));
        }
        model.input_mean.iter_mut().for_each(|v| *v = f64::from(*v as f32));
        model.input_std.iter_mut().for_each(|v| *v = f64::from(*v as f32));
        for p in model.bank.prototypes.iter_mut() {
            p.iter_mut().for_each(|v| *v = f64::from(*v as f32));
        }
        model.bank.momentum = f64::from(0.99f32);
        model.bank.temperature = f64::from(0.1f32);
        model.config.momentum = model.bank.momentum;
        model.config.temperature = model.bank.temperature;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        model.save(&path).unwrap();
        assert_eq!(ToyModel::load(&path).unwrap(), model);

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(ToyModel::load(&path), Err(Error::Format { .. })));
        std::fs::write(&path, b"garbage garbage garbage garbage garbage").unwrap();
        assert!(matches!(ToyModel::load(&path), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn chunked_logits_match_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = small_model(1);
        let x = Array2::from_shape_simple_fn((9000, 6), || rng.random_range(-2.0..2.0));
        let a = model.logits(x.view()).unwrap();
        let b = model.forward(x.view()).unwrap().logits;
        assert_eq!(a, b);
    }

    #[test]
    fn argmax_ties_go_low() {
        let l = ndarray::array![[1.0, 3.0, 3.0], [0.0, 0.0, 0.0], [-1.0, -2.0, 5.0]];
        assert_eq!(argmax_rows(l.view()), vec![1, 0, 2]);
    }
}
