//! A two-layer classifier standing in for the shared base model, with LoRA
//! adapters on both weight matrices.
//!
//! Parameters live in a [`TensorMap`] as `W1 [hidden x input]`, `b1 [hidden]`,
//! `W2 [output x hidden]`, `b2 [output]`. The forward pass is
//! `softmax(W2 · tanh(W1·x + b1) + b2)` over the global label vocabulary;
//! decoding masks the output to the task's own labels.
//!
//! Arithmetic runs in f64 on top of f32 storage.

use std::collections::HashMap;
use std::io::Write;

use rand::distr::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::checkpoint::{CheckpointError, Tensor, TensorMap};
use crate::rng;
use crate::tasks::{dequantize, global_vocabulary, LabeledExample, TaskGroup, TaskMeta};

pub const W1: &str = "W1";
pub const B1: &str = "b1";
pub const W2: &str = "W2";
pub const B2: &str = "b2";

/// Trailing encoder slots: one-hot task group, then one-hot aspect bucket.
pub const GROUP_SLOTS: usize = 3;
pub const ASPECT_BUCKETS: usize = 8;
/// Probability floor in [`cross_entropy`].
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("tensor {name:?}: expected shape {expected:?}, found {actual:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("feature vector has length {actual}, model expects {expected}")]
    Dimension { expected: usize, actual: usize },
    #[error("invalid architecture: {0}")]
    Arch(String),
    #[error("label {0:?} is not in the model vocabulary")]
    UnknownLabel(String),
    #[error("cannot parse feature token {token:?} in example of task {task}")]
    BadToken { task: String, token: String },
    #[error("invalid probability distribution: {0}")]
    InvalidDistribution(String),
    #[error("gold index {index} out of range for {len} classes")]
    GoldOutOfRange { index: usize, len: usize },
    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training set is empty")]
    EmptyTrainingSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelArch {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
}

impl ModelArch {
    pub const DEFAULT_INPUT_DIM: usize = 32;
    pub const DEFAULT_HIDDEN_DIM: usize = 64;

    pub fn for_vocabulary(output_dim: usize) -> Self {
        Self {
            input_dim: Self::DEFAULT_INPUT_DIM,
            hidden_dim: Self::DEFAULT_HIDDEN_DIM,
            output_dim,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.output_dim == 0 {
            return Err(ModelError::Arch(format!("all dims must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn shape_of(&self, name: &str) -> Option<Vec<usize>> {
        match name {
            W1 => Some(vec![self.hidden_dim, self.input_dim]),
            B1 => Some(vec![self.hidden_dim]),
            W2 => Some(vec![self.output_dim, self.hidden_dim]),
            B2 => Some(vec![self.output_dim]),
            _ => None,
        }
    }
}

/// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
pub fn init_base(arch: &ModelArch, seed: u64) -> Result<TensorMap, ModelError> {
    arch.validate()?;
    let mut rng = rng::stream(seed, "init-base", 0);
    let mut matrix = |rows: usize, cols: usize| {
        let bound = 1.0 / (cols as f32).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        (0..rows * cols).map(|_| dist.sample(&mut rng)).collect::<Vec<f32>>()
    };
    let w1 = matrix(arch.hidden_dim, arch.input_dim);
    let w2 = matrix(arch.output_dim, arch.hidden_dim);
    Ok([
        Tensor::new(W1, vec![arch.hidden_dim, arch.input_dim], w1),
        Tensor::new(B1, vec![arch.hidden_dim], vec![0.0; arch.hidden_dim]),
        Tensor::new(W2, vec![arch.output_dim, arch.hidden_dim], w2),
        Tensor::new(B2, vec![arch.output_dim], vec![0.0; arch.output_dim]),
    ]
    .into_iter()
    .collect())
}

/// Hash bucket of an aspect string.
pub fn aspect_bucket(aspect: &str) -> usize {
    (rng::hash_label(aspect) % ASPECT_BUCKETS as u64) as usize
}

/// Maps an example to a fixed-length feature vector: dequantized feature
/// tokens first, then the group one-hot, then the aspect-bucket one-hot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Encoder {
    input_dim: usize,
}

impl Encoder {
    pub fn new(input_dim: usize) -> Result<Self, ModelError> {
        if input_dim <= GROUP_SLOTS + ASPECT_BUCKETS {
            return Err(ModelError::Arch(format!(
                "input_dim {input_dim} leaves no room for features"
            )));
        }
        Ok(Self { input_dim })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn feature_slots(&self) -> usize {
        self.input_dim - GROUP_SLOTS - ASPECT_BUCKETS
    }

    pub fn encode(&self, example: &LabeledExample, group: TaskGroup) -> Result<Vec<f32>, ModelError> {
        let mut out = vec![0.0f32; self.input_dim];
        let slots = self.feature_slots();
        for (i, token) in example.input_text.split_whitespace().take(slots).enumerate() {
            let q: u32 = token.parse().map_err(|_| ModelError::BadToken {
                task: example.task_id.clone(),
                token: token.to_string(),
            })?;
            out[i] = (0.5 * dequantize(q)) as f32;
        }
        out[slots + group.index()] = 1.0;
        if let Some(a) = &example.aspect {
            out[slots + GROUP_SLOTS + aspect_bucket(a)] = 1.0;
        }
        Ok(out)
    }
}

/// Model parameters widened to f64 for computation.
#[derive(Debug, Clone)]
pub struct DenseModel {
    input_dim: usize,
    hidden_dim: usize,
    output_dim: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

fn widen(t: &Tensor) -> Vec<f64> {
    t.data.iter().map(|&v| v as f64).collect()
}

fn expect_shape(params: &TensorMap, name: &str, expected: &[usize]) -> Result<Vec<f64>, ModelError> {
    let t = params.require(name)?;
    if t.shape != expected {
        return Err(ModelError::Shape {
            name: name.to_string(),
            expected: expected.to_vec(),
            actual: t.shape.clone(),
        });
    }
    Ok(widen(t))
}

impl DenseModel {
    /// Reads dims off `W1` and `W2` and checks every tensor against them.
    pub fn from_params(params: &TensorMap) -> Result<Self, ModelError> {
        let w1 = params.require(W1)?;
        let w2 = params.require(W2)?;
        let (hidden_dim, input_dim, output_dim) = match (w1.shape.as_slice(), w2.shape.as_slice()) {
            ([h, i], [o, _]) => (*h, *i, *o),
            _ => {
                return Err(ModelError::Arch(format!(
                    "W1 {:?} and W2 {:?} must be matrices",
                    w1.shape, w2.shape
                )))
            }
        };
        let arch = ModelArch {
            input_dim,
            hidden_dim,
            output_dim,
        };
        Self::with_arch(&arch, params)
    }

    pub fn with_arch(arch: &ModelArch, params: &TensorMap) -> Result<Self, ModelError> {
        arch.validate()?;
        let shape = |n| arch.shape_of(n).unwrap();
        Ok(Self {
            input_dim: arch.input_dim,
            hidden_dim: arch.hidden_dim,
            output_dim: arch.output_dim,
            w1: expect_shape(params, W1, &shape(W1))?,
            b1: expect_shape(params, B1, &shape(B1))?,
            w2: expect_shape(params, W2, &shape(W2))?,
            b2: expect_shape(params, B2, &shape(B2))?,
        })
    }

    pub fn arch(&self) -> ModelArch {
        ModelArch {
            input_dim: self.input_dim,
            hidden_dim: self.hidden_dim,
            output_dim: self.output_dim,
        }
    }

    fn hidden(&self, x: &[f64]) -> Vec<f64> {
        (0..self.hidden_dim)
            .map(|j| {
                let row = &self.w1[j * self.input_dim..(j + 1) * self.input_dim];
                let pre: f64 = row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.b1[j];
                pre.tanh()
            })
            .collect()
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        if x.len() != self.input_dim {
            return Err(ModelError::Dimension {
                expected: self.input_dim,
                actual: x.len(),
            });
        }
        let h = self.hidden(x);
        Ok((0..self.output_dim)
            .map(|k| {
                let row = &self.w2[k * self.hidden_dim..(k + 1) * self.hidden_dim];
                row.iter().zip(&h).map(|(w, v)| w * v).sum::<f64>() + self.b2[k]
            })
            .collect())
    }

    pub fn probabilities(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        Ok(softmax(&self.logits(x)?))
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `softmax(W2 · tanh(W1·x + b1) + b2)`.
pub fn forward(params: &TensorMap, features: &[f32]) -> Result<Vec<f64>, ModelError> {
    let x: Vec<f64> = features.iter().map(|&v| v as f64).collect();
    DenseModel::from_params(params)?.probabilities(&x)
}

/// `-ln(max(predicted[gold], 1e-12))`.
pub fn cross_entropy(predicted: &[f64], gold_index: usize) -> Result<f64, ModelError> {
    if gold_index >= predicted.len() {
        return Err(ModelError::GoldOutOfRange {
            index: gold_index,
            len: predicted.len(),
        });
    }
    if predicted.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(ModelError::InvalidDistribution(
            "entries must be finite and non-negative".into(),
        ));
    }
    let total: f64 = predicted.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(ModelError::InvalidDistribution(format!("sums to {total}")));
    }
    Ok(-predicted[gold_index].max(PROB_FLOOR).ln())
}

/// Index into `candidates` of the highest score; ties go to the earliest.
pub fn masked_argmax(scores: &[f64], candidates: &[usize]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &c) in candidates.iter().enumerate() {
        let s = scores[c];
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i)
}

/// Architecture, encoder and global label vocabulary shared by every expert.
#[derive(Debug, Clone)]
pub struct Classifier {
    arch: ModelArch,
    encoder: Encoder,
    vocabulary: Vec<String>,
    index: HashMap<String, usize>,
}

impl Classifier {
    pub fn new(arch: ModelArch, vocabulary: Vec<String>) -> Result<Self, ModelError> {
        arch.validate()?;
        if vocabulary.len() != arch.output_dim {
            return Err(ModelError::Arch(format!(
                "output_dim {} differs from vocabulary size {}",
                arch.output_dim,
                vocabulary.len()
            )));
        }
        let index = vocabulary.iter().enumerate().map(|(i, l)| (l.clone(), i)).collect();
        Ok(Self {
            encoder: Encoder::new(arch.input_dim)?,
            arch,
            vocabulary,
            index,
        })
    }

    /// Default dims with the registry's label union as output vocabulary.
    pub fn for_registry(registry: &[TaskMeta]) -> Result<Self, ModelError> {
        let vocab = global_vocabulary(registry);
        Self::new(ModelArch::for_vocabulary(vocab.len()), vocab)
    }

    pub fn arch(&self) -> &ModelArch {
        &self.arch
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.vocabulary
    }

    pub fn label_id(&self, label: &str) -> Result<usize, ModelError> {
        self.index
            .get(label)
            .copied()
            .ok_or_else(|| ModelError::UnknownLabel(label.to_string()))
    }

    /// Vocabulary ids of the task's labels, in label-set order.
    pub fn label_ids(&self, task: &TaskMeta) -> Result<Vec<usize>, ModelError> {
        task.label_set.iter().map(|l| self.label_id(l)).collect()
    }

    pub fn encode(&self, example: &LabeledExample, task: &TaskMeta) -> Result<Vec<f64>, ModelError> {
        Ok(self
            .encoder
            .encode(example, task.group)?
            .into_iter()
            .map(f64::from)
            .collect())
    }

    pub fn compile(&self, params: &TensorMap) -> Result<CompiledModel<'_>, ModelError> {
        Ok(CompiledModel {
            classifier: self,
            dense: DenseModel::with_arch(&self.arch, params)?,
        })
    }

    pub fn predict(&self, params: &TensorMap, example: &LabeledExample, task: &TaskMeta) -> Result<String, ModelError> {
        self.compile(params)?.predict(example, task)
    }
}

/// A parameter set bound to a [`Classifier`], ready for repeated inference.
#[derive(Debug, Clone)]
pub struct CompiledModel<'a> {
    classifier: &'a Classifier,
    dense: DenseModel,
}

impl CompiledModel<'_> {
    pub fn dense(&self) -> &DenseModel {
        &self.dense
    }

    /// Position in `task.label_set` of the predicted label.
    pub fn predict_index(&self, example: &LabeledExample, task: &TaskMeta) -> Result<usize, ModelError> {
        let x = self.classifier.encode(example, task)?;
        let logits = self.dense.logits(&x)?;
        let ids = self.classifier.label_ids(task)?;
        masked_argmax(&logits, &ids).ok_or_else(|| ModelError::Arch(format!("task {} has no labels", task.task_id)))
    }

    pub fn predict(&self, example: &LabeledExample, task: &TaskMeta) -> Result<String, ModelError> {
        Ok(task.label_set[self.predict_index(example, task)?].clone())
    }

    pub fn predict_all(&self, examples: &[LabeledExample], task: &TaskMeta) -> Result<Vec<String>, ModelError> {
        examples.iter().map(|e| self.predict(e, task)).collect()
    }
}

/// Low-rank delta `(alpha / rank) · B · A` for one target matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraFactor {
    pub target: String,
    pub in_dim: usize,
    pub out_dim: usize,
    /// `[rank x in_dim]`, row-major.
    pub a: Vec<f32>,
    /// `[out_dim x rank]`, row-major.
    pub b: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub rank: usize,
    pub alpha: f32,
    pub dropout_rate: f32,
    pub factors: Vec<LoraFactor>,
}

impl LoraAdapter {
    /// Adapter on `W1` and `W2` with `A` uniform in `±1/sqrt(in_dim)` and `B = 0`.
    pub fn new(arch: &ModelArch, rank: usize, alpha: f32, dropout_rate: f32, seed: u64) -> Result<Self, ModelError> {
        arch.validate()?;
        if rank == 0 {
            return Err(ModelError::Config("LoRA rank must be at least 1".into()));
        }
        let mut rng = rng::stream(seed, "lora-init", 0);
        let factors = [
            (W1, arch.input_dim, arch.hidden_dim),
            (W2, arch.hidden_dim, arch.output_dim),
        ]
        .into_iter()
        .map(|(target, in_dim, out_dim)| {
            let bound = 1.0 / (in_dim as f32).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            LoraFactor {
                target: target.to_string(),
                in_dim,
                out_dim,
                a: (0..rank * in_dim).map(|_| dist.sample(&mut rng)).collect(),
                b: vec![0.0; out_dim * rank],
            }
        })
        .collect();
        Ok(Self {
            rank,
            alpha,
            dropout_rate,
            factors,
        })
    }

    pub fn scale(&self) -> f64 {
        self.alpha as f64 / self.rank as f64
    }

    pub fn factor(&self, target: &str) -> Option<&LoraFactor> {
        self.factors.iter().find(|f| f.target == target)
    }

    /// `lora.{m}.A`, `lora.{m}.B` per target, then scalars `lora.r` and `lora.alpha`.
    pub fn to_tensor_map(&self) -> TensorMap {
        let mut map = TensorMap::new();
        for f in &self.factors {
            map.insert(Tensor::new(
                format!("lora.{}.A", f.target),
                vec![self.rank, f.in_dim],
                f.a.clone(),
            ));
            map.insert(Tensor::new(
                format!("lora.{}.B", f.target),
                vec![f.out_dim, self.rank],
                f.b.clone(),
            ));
        }
        map.insert(Tensor::scalar("lora.r", self.rank as f32));
        map.insert(Tensor::scalar("lora.alpha", self.alpha));
        map
    }

    /// Inverse of [`to_tensor_map`](Self::to_tensor_map). Dropout is a
    /// training-time setting and comes back as 0.
    pub fn from_tensor_map(map: &TensorMap) -> Result<Self, ModelError> {
        let scalar = |name: &str| -> Result<f32, ModelError> {
            let t = map.require(name)?;
            match t.data.as_slice() {
                [v] => Ok(*v),
                _ => Err(ModelError::Shape {
                    name: name.to_string(),
                    expected: vec![1],
                    actual: t.shape.clone(),
                }),
            }
        };
        let r = scalar("lora.r")?;
        if r < 1.0 || r.fract() != 0.0 {
            return Err(ModelError::Config(format!(
                "lora.r must be a positive integer, got {r}"
            )));
        }
        let rank = r as usize;
        let alpha = scalar("lora.alpha")?;
        let mut factors = Vec::new();
        for t in map.iter() {
            let Some(target) = t.name.strip_prefix("lora.").and_then(|s| s.strip_suffix(".A")) else {
                continue;
            };
            let b = map.require(&format!("lora.{target}.B"))?;
            let (in_dim, out_dim) = match (t.shape.as_slice(), b.shape.as_slice()) {
                ([ra, i], [o, rb]) if *ra == rank && *rb == rank => (*i, *o),
                _ => {
                    return Err(ModelError::Shape {
                        name: t.name.clone(),
                        expected: vec![rank, 0],
                        actual: t.shape.clone(),
                    })
                }
            };
            factors.push(LoraFactor {
                target: target.to_string(),
                in_dim,
                out_dim,
                a: t.data.clone(),
                b: b.data.clone(),
            });
        }
        Ok(Self {
            rank,
            alpha,
            dropout_rate: 0.0,
            factors,
        })
    }
}

/// Base weights with each targeted matrix replaced by `m + (alpha/r)·B·A`.
/// Other tensors are copied unchanged.
pub fn effective_weights(base: &TensorMap, adapter: &LoraAdapter) -> Result<TensorMap, ModelError> {
    let mut out = base.clone();
    let scale = adapter.scale();
    let r = adapter.rank;
    for f in &adapter.factors {
        let m = out
            .get_mut(&f.target)
            .ok_or_else(|| CheckpointError::Missing(f.target.clone()))?;
        if m.shape != [f.out_dim, f.in_dim] || f.a.len() != r * f.in_dim || f.b.len() != f.out_dim * r {
            return Err(ModelError::Shape {
                name: f.target.clone(),
                expected: vec![f.out_dim, f.in_dim],
                actual: m.shape.clone(),
            });
        }
        for i in 0..f.out_dim {
            for j in 0..f.in_dim {
                let delta: f64 = (0..r)
                    .map(|k| f.b[i * r + k] as f64 * f.a[k * f.in_dim + j] as f64)
                    .sum::<f64>()
                    * scale;
                if delta != 0.0 {
                    let w = &mut m.data[i * f.in_dim + j];
                    *w = (*w as f64 + delta) as f32;
                }
            }
        }
    }
    Ok(out)
}

/// Expert fine-tuning settings. Defaults are the instruction-tuning phase
/// hyperparameters (batch 64, micro-batch 4, lr 3e-4, 10 epochs, weight decay
/// 0.1, LoRA r 4, alpha 16, dropout 0.05).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub micro_batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub weight_decay: f64,
    pub lora_r: usize,
    pub lora_alpha: f32,
    pub lora_dropout: f32,
    pub seed: u64,
    pub early_stop_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            micro_batch_size: 4,
            learning_rate: 3e-4,
            max_epochs: 10,
            weight_decay: 0.1,
            lora_r: 4,
            lora_alpha: 16.0,
            lora_dropout: 0.05,
            seed: 0,
            early_stop_patience: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.micro_batch_size == 0 || self.batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        if !self.batch_size.is_multiple_of(self.micro_batch_size) {
            return bad(format!(
                "batch_size {} is not divisible by micro_batch_size {}",
                self.batch_size, self.micro_batch_size
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.weight_decay) && self.weight_decay != 0.0 {
            return bad(format!("weight_decay must be in [0, 1), got {}", self.weight_decay));
        }
        if self.weight_decay * self.learning_rate >= 1.0 {
            return bad("learning_rate * weight_decay must be below 1".into());
        }
        if !(0.0..1.0).contains(&self.lora_dropout) {
            return bad(format!("lora_dropout must be in [0, 1), got {}", self.lora_dropout));
        }
        if self.lora_r == 0 {
            return bad("lora_r must be at least 1".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        Ok(())
    }
}

/// An encoded training item: features and the gold id in the global vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub gold: usize,
}

pub fn encode_samples(
    classifier: &Classifier,
    examples: &[LabeledExample],
    task: &TaskMeta,
) -> Result<Vec<Sample>, ModelError> {
    examples
        .iter()
        .map(|e| {
            Ok(Sample {
                features: classifier.encode(e, task)?,
                gold: classifier.label_id(&e.gold)?,
            })
        })
        .collect()
}

/// Adapter parameters for `W1` and `W2` in f64, as trained. Also used as the
/// gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterState {
    pub scale: f64,
    pub rank: usize,
    pub a1: Vec<f64>,
    pub b1: Vec<f64>,
    pub a2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl AdapterState {
    pub fn from_adapter(adapter: &LoraAdapter, arch: &ModelArch) -> Result<Self, ModelError> {
        let get = |target: &str, in_dim: usize, out_dim: usize| -> Result<&LoraFactor, ModelError> {
            let f = adapter
                .factor(target)
                .ok_or_else(|| CheckpointError::Missing(format!("lora.{target}.A")))?;
            if f.in_dim != in_dim || f.out_dim != out_dim {
                return Err(ModelError::Shape {
                    name: target.to_string(),
                    expected: vec![out_dim, in_dim],
                    actual: vec![f.out_dim, f.in_dim],
                });
            }
            Ok(f)
        };
        let f1 = get(W1, arch.input_dim, arch.hidden_dim)?;
        let f2 = get(W2, arch.hidden_dim, arch.output_dim)?;
        let w = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<f64>>();
        Ok(Self {
            scale: adapter.scale(),
            rank: adapter.rank,
            a1: w(&f1.a),
            b1: w(&f1.b),
            a2: w(&f2.a),
            b2: w(&f2.b),
        })
    }

    fn zeros_like(&self) -> Self {
        Self {
            scale: self.scale,
            rank: self.rank,
            a1: vec![0.0; self.a1.len()],
            b1: vec![0.0; self.b1.len()],
            a2: vec![0.0; self.a2.len()],
            b2: vec![0.0; self.b2.len()],
        }
    }

    pub fn params(&self) -> [&Vec<f64>; 4] {
        [&self.a1, &self.b1, &self.a2, &self.b2]
    }

    pub fn params_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.a1, &mut self.b1, &mut self.a2, &mut self.b2]
    }

    /// Writes the parameters back into `template`'s `W1`/`W2` factors.
    pub fn write_to(&self, template: &LoraAdapter) -> LoraAdapter {
        let mut out = template.clone();
        for f in out.factors.iter_mut() {
            let (a, b) = match f.target.as_str() {
                W1 => (&self.a1, &self.b1),
                W2 => (&self.a2, &self.b2),
                _ => continue,
            };
            f.a = a.iter().map(|&v| v as f32).collect();
            f.b = b.iter().map(|&v| v as f32).collect();
        }
        out
    }
}

/// Inverted-dropout masks on the adapter inputs of both layers.
struct DropoutMasks {
    input: Vec<f64>,
    hidden: Vec<f64>,
}

impl DropoutMasks {
    fn sample<R: Rng>(rng: &mut R, rate: f64, input_dim: usize, hidden_dim: usize) -> Self {
        let keep = 1.0 / (1.0 - rate);
        let mut mask = |n: usize| {
            (0..n)
                .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
                .collect()
        };
        let input = mask(input_dim);
        let hidden = mask(hidden_dim);
        Self { input, hidden }
    }
}

fn matvec(m: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|i| m[i * cols..(i + 1) * cols].iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn matvec_t(m: &[f64], rows: usize, cols: usize, y: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for i in 0..rows {
        let yi = y[i];
        for (o, w) in out.iter_mut().zip(&m[i * cols..(i + 1) * cols]) {
            *o += w * yi;
        }
    }
    out
}

fn add_outer(acc: &mut [f64], coef: f64, u: &[f64], v: &[f64]) {
    let cols = v.len();
    for (i, ui) in u.iter().enumerate() {
        let c = coef * ui;
        for (a, vj) in acc[i * cols..(i + 1) * cols].iter_mut().zip(v) {
            *a += c * vj;
        }
    }
}

/// Cross-entropy of one sample through the adapted model, accumulating the
/// adapter gradient into `grad` when given.
fn sample_loss(
    base: &DenseModel,
    st: &AdapterState,
    sample: &Sample,
    masks: Option<&DropoutMasks>,
    grad: Option<&mut AdapterState>,
) -> f64 {
    let (n_in, n_h, n_out, r, s) = (base.input_dim, base.hidden_dim, base.output_dim, st.rank, st.scale);
    let x = &sample.features;
    let apply = |v: &[f64], m: Option<&Vec<f64>>| match m {
        Some(m) => v.iter().zip(m).map(|(a, b)| a * b).collect(),
        None => v.to_vec(),
    };

    let u1: Vec<f64> = apply(x, masks.map(|m| &m.input));
    let t1 = matvec(&st.a1, r, n_in, &u1);
    let lora1 = matvec(&st.b1, n_h, r, &t1);
    let base1 = matvec(&base.w1, n_h, n_in, x);
    let h: Vec<f64> = (0..n_h)
        .map(|j| (base1[j] + base.b1[j] + s * lora1[j]).tanh())
        .collect();

    let u2: Vec<f64> = apply(&h, masks.map(|m| &m.hidden));
    let t2 = matvec(&st.a2, r, n_h, &u2);
    let lora2 = matvec(&st.b2, n_out, r, &t2);
    let base2 = matvec(&base.w2, n_out, n_h, &h);
    let z: Vec<f64> = (0..n_out).map(|k| base2[k] + base.b2[k] + s * lora2[k]).collect();

    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = z.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    let loss = log_sum - z[sample.gold];

    if let Some(g) = grad {
        let mut dz: Vec<f64> = z.iter().map(|v| (v - log_sum).exp()).collect();
        dz[sample.gold] -= 1.0;

        add_outer(&mut g.b2, s, &dz, &t2);
        let dt2: Vec<f64> = matvec_t(&st.b2, n_out, r, &dz).into_iter().map(|v| s * v).collect();
        add_outer(&mut g.a2, 1.0, &dt2, &u2);

        let mut dh = matvec_t(&base.w2, n_out, n_h, &dz);
        let lora_dh = matvec_t(&st.a2, r, n_h, &dt2);
        let mask2 = masks.map(|m| &m.hidden);
        for j in 0..n_h {
            let m = mask2.map_or(1.0, |m| m[j]);
            dh[j] += m * lora_dh[j];
        }
        let dpre: Vec<f64> = dh.iter().zip(&h).map(|(d, hv)| d * (1.0 - hv * hv)).collect();

        add_outer(&mut g.b1, s, &dpre, &t1);
        let dt1: Vec<f64> = matvec_t(&st.b1, n_h, r, &dpre).into_iter().map(|v| s * v).collect();
        add_outer(&mut g.a1, 1.0, &dt1, &u1);
    }
    loss
}

/// Mean cross-entropy over `samples` with dropout off.
pub fn batch_loss(base: &DenseModel, state: &AdapterState, samples: &[Sample]) -> f64 {
    samples
        .iter()
        .map(|s| sample_loss(base, state, s, None, None))
        .sum::<f64>()
        / samples.len() as f64
}

/// Mean cross-entropy and its gradient with respect to every adapter
/// parameter, dropout off.
pub fn batch_loss_and_gradient(base: &DenseModel, state: &AdapterState, samples: &[Sample]) -> (f64, AdapterState) {
    let mut grad = state.zeros_like();
    let mut total = 0.0;
    for s in samples {
        total += sample_loss(base, state, s, None, Some(&mut grad));
    }
    let n = samples.len() as f64;
    for p in grad.params_mut() {
        p.iter_mut().for_each(|v| *v /= n);
    }
    (total / n, grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub adapter: LoraAdapter,
    pub history: Vec<EpochStats>,
}

/// Fine-tunes a fresh LoRA adapter on one task with the base frozen.
///
/// Each epoch shuffles the data, runs micro-batches of `micro_batch_size` and
/// applies one SGD step per `batch_size` items (or at the end of the epoch)
/// using the mean accumulated gradient, followed by decoupled weight decay.
/// Training stops after `max_epochs`, or once the epoch mean loss has failed
/// to improve on the best so far by at least 1e-4 for `early_stop_patience`
/// epochs in a row.
pub fn train_expert(
    classifier: &Classifier,
    base: &TensorMap,
    train: &[LabeledExample],
    task: &TaskMeta,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, ModelError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(ModelError::EmptyTrainingSet);
    }
    let arch = *classifier.arch();
    let dense = DenseModel::with_arch(&arch, base)?;
    let samples = encode_samples(classifier, train, task)?;
    let template = LoraAdapter::new(&arch, cfg.lora_r, cfg.lora_alpha, cfg.lora_dropout, cfg.seed)?;
    let mut state = AdapterState::from_adapter(&template, &arch)?;
    let mut rng = rng::stream(cfg.seed, "train", 0);
    let dropout = cfg.lora_dropout as f64;
    let steps_per_update = cfg.batch_size / cfg.micro_batch_size;
    let decay = 1.0 - cfg.learning_rate * cfg.weight_decay;

    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::new();
    let mut best = f64::INFINITY;
    let mut stale = 0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut grad = state.zeros_like();
        let mut pending = 0usize;
        let mut micro_steps = 0usize;
        let mut total_loss = 0.0;
        let chunks: Vec<&[usize]> = order.chunks(cfg.micro_batch_size).collect();
        let n_chunks = chunks.len();
        for (ci, chunk) in chunks.into_iter().enumerate() {
            for &i in chunk {
                let masks =
                    (dropout > 0.0).then(|| DropoutMasks::sample(&mut rng, dropout, arch.input_dim, arch.hidden_dim));
                total_loss += sample_loss(&dense, &state, &samples[i], masks.as_ref(), Some(&mut grad));
                pending += 1;
            }
            micro_steps += 1;
            if micro_steps == steps_per_update || ci + 1 == n_chunks {
                let inv = 1.0 / pending as f64;
                for (p, g) in state.params_mut().into_iter().zip(grad.params_mut()) {
                    for (pv, gv) in p.iter_mut().zip(g.iter_mut()) {
                        *pv = *pv * decay - cfg.learning_rate * *gv * inv;
                        *gv = 0.0;
                    }
                }
                pending = 0;
                micro_steps = 0;
            }
        }
        let mean_loss = total_loss / samples.len() as f64;
        let adapter = state.write_to(&template);
        if !mean_loss.is_finite()
            || adapter
                .factors
                .iter()
                .any(|f| f.a.iter().chain(&f.b).any(|v| !v.is_finite()))
        {
            return Err(ModelError::Diverged { epoch, loss: mean_loss });
        }
        let compiled = classifier.compile(&effective_weights(base, &adapter)?)?;
        let mut correct = 0usize;
        for ex in train {
            if compiled.predict(ex, task)? == ex.gold {
                correct += 1;
            }
        }
        history.push(EpochStats {
            epoch,
            mean_loss,
            train_accuracy: correct as f64 / train.len() as f64,
        });
        if best - mean_loss >= 1e-4 {
            best = mean_loss;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.early_stop_patience {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        adapter: state.write_to(&template),
        history,
    })
}

/// Writes `epoch,mean_loss,train_accuracy` rows.
pub fn write_history_csv<W: Write>(out: W, history: &[EpochStats]) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(out);
    writeln!(w, "epoch,mean_loss,train_accuracy")?;
    for h in history {
        writeln!(w, "{},{},{}", h.epoch, h.mean_loss, h.train_accuracy)?;
    }
    w.flush()
}
