//! Feed-forward identification classifier trained with momentum SGD.
//!
//! Layers are dense with a rectifier between them and no activation after the
//! last one, whose width is the number of training identities. The
//! post-activation output of a designated hidden layer (the penultimate one
//! by default) is the embedding used for retrieval and mining.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{FeatureVector, LabeledDataset};
use crate::error::{Error, Result};
use crate::seed;

/// A dense layer `y = W x + b` with `W` stored row-major as `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    in_dim: usize,
    out_dim: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    pub fn from_parts(in_dim: usize, out_dim: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::config("layer dimensions must be at least 1"));
        }
        if weights.len() != in_dim * out_dim {
            return Err(Error::DimensionMismatch {
                expected: in_dim * out_dim,
                found: weights.len(),
            });
        }
        if bias.len() != out_dim {
            return Err(Error::DimensionMismatch {
                expected: out_dim,
                found: bias.len(),
            });
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self {
            in_dim,
            out_dim,
            weights,
            bias,
        })
    }

    #[inline]
    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    #[inline]
    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    #[inline]
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    #[inline]
    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    #[inline]
    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    #[inline]
    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    fn same_shape(&self, other: &Dense) -> bool {
        self.in_dim == other.in_dim && self.out_dim == other.out_dim
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.weights
                .chunks_exact(self.in_dim)
                .zip(&self.bias)
                .map(|(row, b)| row.iter().zip(x).fold(*b, |acc, (w, v)| acc + w * v)),
        );
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().chain(&self.bias)
    }
}

/// Classifier parameters and momentum buffers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawModel")]
pub struct ModelParams {
    layers: Vec<Dense>,
    velocity: Vec<Dense>,
    /// Layer whose rectified output is the embedding. `None` means the raw
    /// input, which only makes sense for single-layer models.
    embedding_layer: Option<usize>,
}

#[derive(Deserialize)]
struct RawModel {
    layers: Vec<Dense>,
    velocity: Vec<Dense>,
    embedding_layer: Option<usize>,
}

impl TryFrom<RawModel> for ModelParams {
    type Error = Error;

    fn try_from(raw: RawModel) -> Result<Self> {
        let mut model = ModelParams::from_layers(raw.layers, raw.embedding_layer)?;
        if raw.velocity.len() != model.layers.len()
            || raw.velocity.iter().zip(&model.layers).any(|(v, l)| !v.same_shape(l))
        {
            return Err(Error::config("momentum buffers do not match layer shapes"));
        }
        for v in &raw.velocity {
            Dense::from_parts(v.in_dim, v.out_dim, v.weights.clone(), v.bias.clone())?;
        }
        model.velocity = raw.velocity;
        Ok(model)
    }
}

/// Output of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub logits: Vec<f64>,
    pub embedding: Vec<f64>,
}

impl ModelParams {
    /// Builds a model from explicit layers with zeroed momentum buffers.
    pub fn from_layers(layers: Vec<Dense>, embedding_layer: Option<usize>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("model needs at least one layer"));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::DimensionMismatch {
                    expected: pair[0].out_dim,
                    found: pair[1].in_dim,
                });
            }
        }
        for l in &layers {
            Dense::from_parts(l.in_dim, l.out_dim, l.weights.clone(), l.bias.clone())?;
        }
        if let Some(e) = embedding_layer {
            if e + 1 >= layers.len() {
                return Err(Error::config(format!(
                    "embedding layer {e} must precede the output layer"
                )));
            }
        }
        let velocity = layers.iter().map(|l| Dense::zeros(l.in_dim, l.out_dim)).collect();
        Ok(Self {
            layers,
            velocity,
            embedding_layer,
        })
    }

    /// Gaussian weights with standard deviation `init_std`, zero biases, and
    /// the embedding taken from the last hidden layer.
    pub fn init(input_dim: usize, hidden_dims: &[usize], num_classes: usize, init_std: f64, seed: u64) -> Result<Self> {
        if input_dim == 0 || num_classes == 0 || hidden_dims.contains(&0) {
            return Err(Error::config("layer widths must be at least 1"));
        }
        let normal = Normal::new(0.0, init_std).map_err(|e| Error::config(format!("init_std {init_std}: {e}")))?;
        let mut rng = seed::rng(seed);
        let mut dims = Vec::with_capacity(hidden_dims.len() + 2);
        dims.push(input_dim);
        dims.extend_from_slice(hidden_dims);
        dims.push(num_classes);
        let layers = dims
            .windows(2)
            .map(|w| {
                let mut l = Dense::zeros(w[0], w[1]);
                l.weights.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
                l
            })
            .collect();
        Self::from_layers(layers, hidden_dims.len().checked_sub(1))
    }

    #[inline]
    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    #[inline]
    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    #[inline]
    pub fn velocity(&self) -> &[Dense] {
        &self.velocity
    }

    #[inline]
    pub fn embedding_layer(&self) -> Option<usize> {
        self.embedding_layer
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn embedding_dim(&self) -> usize {
        match self.embedding_layer {
            Some(e) => self.layers[e].out_dim,
            None => self.input_dim(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .chain(&self.velocity)
            .all(|l| l.values().all(|v| v.is_finite()))
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                found: x.len(),
            });
        }
        Ok(())
    }

    /// Activations of every layer: `acts[0]` is the input, `acts[l + 1]` the
    /// (rectified unless last) output of layer `l`.
    fn trace(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let last = self.layers.len() - 1;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::with_capacity(layer.out_dim);
            layer.apply(&acts[i], &mut out);
            if i < last {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(out);
        }
        acts
    }

    pub fn forward(&self, x: &[f64]) -> Result<Forward> {
        self.check_input(x)?;
        let mut acts = self.trace(x);
        let logits = acts.pop().expect("at least one layer");
        let embedding = match self.embedding_layer {
            Some(e) => std::mem::take(&mut acts[e + 1]),
            None => std::mem::take(&mut acts[0]),
        };
        Ok(Forward { logits, embedding })
    }

    /// Index of the largest logit, lowest index on ties.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        let logits = self.forward(x)?.logits;
        Ok(argmax(&logits))
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable SoftMax cross-entropy.
///
/// Returns the loss `-log softmax(logits)[y]` and its gradient with respect
/// to the logits, `softmax(logits) - one_hot(y)`.
pub fn softmax_loss(logits: &[f64], y: usize) -> Result<(f64, Vec<f64>)> {
    if y >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label: y,
            num_identities: logits.len(),
        });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = (sum.ln() - (logits[y] - max)).max(0.0);
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[y] -= 1.0;
    Ok((loss, grad))
}

/// Non-empty list of indices into a dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch(Vec<usize>);

impl Batch {
    pub fn new(indices: Vec<usize>, dataset_len: usize) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::config("empty batch"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= dataset_len) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                len: dataset_len,
            });
        }
        Ok(Self(indices))
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Gradient of the batch-mean loss, one entry per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
    /// Mean loss over the batch.
    pub loss: f64,
}

impl Gradients {
    pub fn zeros_like(model: &ModelParams) -> Self {
        Self {
            layers: model.layers.iter().map(|l| Dense::zeros(l.in_dim, l.out_dim)).collect(),
            loss: 0.0,
        }
    }
}

fn accumulate_sample(model: &ModelParams, x: &[f64], y: usize, grads: &mut Gradients) -> Result<f64> {
    let acts = model.trace(x);
    let (loss, mut delta) = softmax_loss(&acts[acts.len() - 1], y)?;
    for l in (0..model.layers.len()).rev() {
        let input = &acts[l];
        let g = &mut grads.layers[l];
        for (o, &d) in delta.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let row = &mut g.weights[o * g.in_dim..(o + 1) * g.in_dim];
            row.iter_mut().zip(input).for_each(|(w, &v)| *w += d * v);
            g.bias[o] += d;
        }
        if l == 0 {
            break;
        }
        let layer = &model.layers[l];
        let mut prev = vec![0.0; layer.in_dim];
        for (o, &d) in delta.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
            prev.iter_mut().zip(row).for_each(|(p, &w)| *p += w * d);
        }
        // Rectifier derivative, zero at the kink.
        prev.iter_mut().zip(input).for_each(|(p, &a)| {
            if a <= 0.0 {
                *p = 0.0
            }
        });
        delta = prev;
    }
    Ok(loss)
}

/// Gradient of `(1/|batch|) * sum(loss)` with respect to every parameter.
pub fn backward(model: &ModelParams, batch: &Batch, dataset: &LabeledDataset) -> Result<Gradients> {
    let mut grads = Gradients::zeros_like(model);
    let mut total = 0.0;
    for &i in batch.indices() {
        let r = dataset.records().get(i).ok_or(Error::IndexOutOfRange {
            index: i,
            len: dataset.len(),
        })?;
        model.check_input(r.vector.as_slice())?;
        total += accumulate_sample(model, r.vector.as_slice(), r.identity, &mut grads)?;
    }
    let n = batch.len() as f64;
    for g in &mut grads.layers {
        g.weights.iter_mut().chain(g.bias.iter_mut()).for_each(|v| *v /= n);
    }
    grads.loss = total / n;
    Ok(grads)
}

fn default_learning_rate() -> f64 {
    0.001
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    0.0005
}
fn default_lr_factor() -> f64 {
    0.1
}
fn default_epochs() -> usize {
    25
}
fn default_lr_step_epochs() -> usize {
    5
}
fn default_init_std() -> f64 {
    0.01
}

/// Optimizer and architecture settings.
///
/// Defaults follow the reference recipe: learning rate 0.001 cut by 0.1
/// every 5 epochs over 25 epochs, momentum 0.9, weight decay 0.0005.
/// `batch_size` has no default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr_step_epochs")]
    pub lr_step_epochs: usize,
    #[serde(default = "default_lr_factor")]
    pub lr_factor: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

impl TrainConfig {
    pub fn new(batch_size: usize, hidden_dims: Vec<usize>) -> Self {
        Self {
            learning_rate: default_learning_rate(),
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            batch_size,
            epochs: default_epochs(),
            lr_step_epochs: default_lr_step_epochs(),
            lr_factor: default_lr_factor(),
            seed: 0,
            hidden_dims,
            init_std: default_init_std(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be finite and >= 0");
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return bad("lr_factor must lie in (0, 1)");
        }
        if self.batch_size == 0 || self.epochs == 0 || self.lr_step_epochs == 0 {
            return bad("batch_size, epochs and lr_step_epochs must be at least 1");
        }
        if self.hidden_dims.contains(&0) {
            return bad("hidden layer widths must be at least 1");
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return bad("init_std must be finite and >= 0");
        }
        Ok(())
    }

    /// Step-decayed learning rate for a zero-based epoch.
    pub fn effective_learning_rate(&self, epoch: usize) -> f64 {
        let drops = (epoch / self.lr_step_epochs) as i32;
        self.learning_rate * self.lr_factor.powi(drops)
    }
}

/// One heavy-ball step with weight decay folded into the gradient:
/// `v = momentum * v - lr * (g + weight_decay * theta)`, `theta += v`.
pub fn sgd_step(model: &mut ModelParams, grads: &Gradients, config: &TrainConfig, epoch: usize) -> Result<()> {
    if grads.layers.len() != model.layers.len() || grads.layers.iter().zip(&model.layers).any(|(g, l)| !g.same_shape(l))
    {
        return Err(Error::config("gradient shapes do not match the model"));
    }
    let lr = config.effective_learning_rate(epoch);
    let mu = config.momentum;
    let wd = config.weight_decay;
    let update = |theta: &mut [f64], vel: &mut [f64], g: &[f64]| {
        for ((t, v), &g) in theta.iter_mut().zip(vel.iter_mut()).zip(g) {
            *v = mu * *v - lr * (g + wd * *t);
            *t += *v;
        }
    };
    for ((layer, vel), g) in model.layers.iter_mut().zip(&mut model.velocity).zip(&grads.layers) {
        update(&mut layer.weights, &mut vel.weights, &g.weights);
        update(&mut layer.bias, &mut vel.bias, &g.bias);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub learning_rate: f64,
    /// Mean per-sample loss seen during the epoch.
    pub mean_loss: f64,
    /// Classification accuracy on the validation set after the epoch.
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
}

/// Fraction of records whose arg-max prediction equals their label.
pub fn accuracy(model: &ModelParams, dataset: &LabeledDataset) -> Result<Option<f64>> {
    if dataset.is_empty() {
        return Ok(None);
    }
    let mut correct = 0usize;
    for r in dataset.records() {
        if model.predict(r.vector.as_slice())? == r.identity {
            correct += 1;
        }
    }
    Ok(Some(correct as f64 / dataset.len() as f64))
}

/// Trains a fresh model on a canonicalized dataset.
///
/// Each epoch shuffles the records, walks them in minibatches (the last one
/// may be short), and applies [`backward`] + [`sgd_step`] per batch. The
/// result is a pure function of the data and config.
pub fn train(
    train_set: &LabeledDataset,
    val_set: &LabeledDataset,
    config: &TrainConfig,
) -> Result<(ModelParams, TrainLog)> {
    config.validate()?;
    if train_set.num_identities() < 2 {
        return Err(Error::NotEnoughIdentities);
    }
    if !train_set.is_canonical() {
        return Err(Error::config("training labels must be canonical (0..C)"));
    }
    let classes = train_set.num_identities();
    if let Some(r) = val_set.records().iter().find(|r| r.identity >= classes) {
        return Err(Error::LabelOutOfRange {
            label: r.identity,
            num_identities: classes,
        });
    }
    let dim = train_set.dim().expect("non-empty");
    if let Some(d) = val_set.dim() {
        if d != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: d,
            });
        }
    }
    let mut model = ModelParams::init(
        dim,
        &config.hidden_dims,
        classes,
        config.init_std,
        seed::derive(config.seed, "init"),
    )?;
    let mut shuffle_rng = seed::rng(seed::derive(config.seed, "shuffle"));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut sample_loss = vec![0.0; train_set.len()];
    let mut log = TrainLog::default();
    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(config.batch_size) {
            let mut grads = Gradients::zeros_like(&model);
            for &i in chunk {
                let r = &train_set.records()[i];
                sample_loss[i] = accumulate_sample(&model, r.vector.as_slice(), r.identity, &mut grads)?;
            }
            let n = chunk.len() as f64;
            for g in &mut grads.layers {
                g.weights.iter_mut().chain(g.bias.iter_mut()).for_each(|v| *v /= n);
            }
            sgd_step(&mut model, &grads, config, epoch)?;
        }
        if !model.is_finite() {
            return Err(Error::config(format!(
                "training diverged at epoch {epoch}; lower the learning rate"
            )));
        }
        // Summed in record order so the value does not depend on the shuffle.
        let mean_loss = sample_loss.iter().sum::<f64>() / train_set.len() as f64;
        log.epochs.push(EpochStats {
            epoch,
            learning_rate: config.effective_learning_rate(epoch),
            mean_loss,
            val_accuracy: accuracy(&model, val_set)?,
        });
    }
    Ok((model, log))
}

/// Embedding of every input vector, in input order.
pub fn extract_features<'a, I>(model: &ModelParams, vectors: I) -> Result<Vec<FeatureVector>>
where
    I: IntoIterator<Item = &'a FeatureVector>,
{
    let vectors: Vec<&FeatureVector> = vectors.into_iter().collect();
    vectors
        .par_iter()
        .map(|v| {
            let f = model.forward(v.as_slice())?;
            FeatureVector::new(f.embedding)
        })
        .collect()
}

pub const CHECKPOINT_FORMAT: &str = "ppr-model";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Versioned model container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub model: ModelParams,
}

impl Checkpoint {
    pub fn new(model: ModelParams, config_hash: impl Into<String>, seed: u64) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config_hash: config_hash.into(),
            seed,
            model,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::config(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::EmbeddingRecord;

    fn fv(v: &[f64]) -> FeatureVector {
        FeatureVector::new(v.to_vec()).unwrap()
    }

    fn identity_layer(n: usize) -> Dense {
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            w[i * n + i] = 1.0;
        }
        Dense::from_parts(n, n, w, vec![0.0; n]).unwrap()
    }

    #[test]
    fn zero_model_gives_zero_outputs() {
        let model = ModelParams::from_layers(vec![Dense::zeros(3, 4), Dense::zeros(4, 2)], Some(0)).unwrap();
        let f = model.forward(&[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(f.logits, vec![0.0, 0.0]);
        assert_eq!(f.embedding, vec![0.0; 4]);
    }

    #[test]
    fn identity_single_layer() {
        let model = ModelParams::from_layers(vec![identity_layer(2)], None).unwrap();
        let f = model.forward(&[1.0, 2.0]).unwrap();
        assert_eq!(f.logits, vec![1.0, 2.0]);
        assert_eq!(f.embedding, vec![1.0, 2.0]);
    }

    #[test]
    fn forward_rejects_wrong_dimension() {
        let model = ModelParams::init(3, &[4], 2, 0.1, 1).unwrap();
        assert!(matches!(
            model.forward(&[1.0]),
            Err(Error::DimensionMismatch { expected: 3, found: 1 })
        ));
    }

    #[test]
    fn embedding_of_zero_input_through_identity_layer() {
        let model = ModelParams::from_layers(vec![identity_layer(2), Dense::zeros(2, 2)], Some(0)).unwrap();
        let out = extract_features(&model, &[fv(&[0.0, 0.0]), fv(&[-1.0, 3.0])]).unwrap();
        assert_eq!(out[0].as_slice(), &[0.0, 0.0]);
        assert_eq!(out[1].as_slice(), &[0.0, 3.0]);
    }

    #[test]
    fn softmax_uniform_logits() {
        let (loss, grad) = softmax_loss(&[0.0, 0.0], 0).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(grad, vec![-0.5, 0.5]);
        for c in 2..10 {
            let (loss, _) = softmax_loss(&vec![3.5; c], c - 1).unwrap();
            assert_eq!(loss, (c as f64).ln());
        }
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let (loss, grad) = softmax_loss(&[1000.0, 0.0], 0).unwrap();
        assert!(loss.abs() < 1e-300 || loss == 0.0);
        assert!(grad.iter().all(|g| g.is_finite()));
        let (loss, _) = softmax_loss(&[1000.0, 0.0], 1).unwrap();
        assert!((loss - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn softmax_rejects_bad_label() {
        assert!(matches!(
            softmax_loss(&[0.0, 1.0], 2),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn single_layer_gradient_is_outer_product() {
        let layer = Dense::from_parts(2, 3, vec![0.1, -0.2, 0.3, 0.0, 0.5, 0.4], vec![0.0, 0.1, -0.1]).unwrap();
        let model = ModelParams::from_layers(vec![layer], None).unwrap();
        let x = [2.0, -1.0];
        let data = LabeledDataset::new(vec![EmbeddingRecord::new(fv(&x), 1, 0)]).unwrap();
        let grads = backward(&model, &Batch::new(vec![0], 1).unwrap(), &data).unwrap();
        let logits = model.forward(&x).unwrap().logits;
        let (_, gl) = softmax_loss(&logits, 1).unwrap();
        for o in 0..3 {
            for i in 0..2 {
                assert_eq!(grads.layers[0].weights()[o * 2 + i], gl[o] * x[i]);
            }
            assert_eq!(grads.layers[0].bias()[o], gl[o]);
        }
    }

    #[test]
    fn duplicated_sample_has_same_gradient() {
        let model = ModelParams::init(3, &[5], 4, 0.3, 11).unwrap();
        let data = LabeledDataset::new(vec![EmbeddingRecord::new(fv(&[0.3, -0.7, 1.1]), 2, 0)]).unwrap();
        let one = backward(&model, &Batch::new(vec![0], 1).unwrap(), &data).unwrap();
        let two = backward(&model, &Batch::new(vec![0, 0], 1).unwrap(), &data).unwrap();
        assert_eq!(one, two);
    }

    #[test]
    fn batch_validation() {
        assert!(Batch::new(vec![], 3).is_err());
        assert!(matches!(
            Batch::new(vec![0, 3], 3),
            Err(Error::IndexOutOfRange { index: 3, len: 3 })
        ));
    }

    fn scalar_model(theta: f64) -> ModelParams {
        let layer = Dense::from_parts(1, 1, vec![theta], vec![0.0]).unwrap();
        ModelParams::from_layers(vec![layer], None).unwrap()
    }

    fn scalar_grad(g: f64) -> Gradients {
        Gradients {
            layers: vec![Dense::from_parts(1, 1, vec![g], vec![0.0]).unwrap()],
            loss: 0.0,
        }
    }

    #[test]
    fn zero_gradient_is_fixed_point_without_decay() {
        let mut config = TrainConfig::new(1, vec![]);
        config.weight_decay = 0.0;
        let mut model = ModelParams::init(3, &[2], 2, 0.5, 3).unwrap();
        let before = model.clone();
        let zero = Gradients::zeros_like(&model);
        sgd_step(&mut model, &zero, &config, 0).unwrap();
        assert_eq!(model.layers(), before.layers());
    }

    #[test]
    fn decay_only_step() {
        let mut config = TrainConfig::new(1, vec![]);
        config.momentum = 0.0;
        let mut model = scalar_model(1.0);
        sgd_step(&mut model, &scalar_grad(0.0), &config, 0).unwrap();
        assert_eq!(model.layers()[0].weights()[0], 0.9999995);
    }

    #[test]
    fn momentum_recurrence_two_steps() {
        let mut config = TrainConfig::new(1, vec![]);
        config.learning_rate = 0.1;
        config.weight_decay = 0.0;
        let mut model = scalar_model(0.0);
        sgd_step(&mut model, &scalar_grad(1.0), &config, 0).unwrap();
        assert!((model.layers()[0].weights()[0] + 0.1).abs() < 1e-12);
        sgd_step(&mut model, &scalar_grad(1.0), &config, 0).unwrap();
        assert!((model.layers()[0].weights()[0] + 0.29).abs() < 1e-12);
    }

    #[test]
    fn learning_rate_schedule() {
        let mut config = TrainConfig::new(1, vec![]);
        config.lr_step_epochs = 3;
        let rates: Vec<f64> = (0..10).map(|e| config.effective_learning_rate(e)).collect();
        assert_eq!(&rates[..3], &[0.001; 3]);
        assert!(rates.windows(2).all(|w| w[1] <= w[0]));
        assert!((rates[3] - 0.0001).abs() < 1e-18);
        assert!((rates[9] - 0.000001).abs() < 1e-20);
    }

    #[test]
    fn weight_decay_shrinks_norm() {
        let config = TrainConfig::new(1, vec![]);
        let mut model = ModelParams::init(4, &[3], 2, 1.0, 8).unwrap();
        let norm = |m: &ModelParams| -> f64 { m.layers().iter().flat_map(|l| l.values()).map(|v| v * v).sum() };
        let before = norm(&model);
        let zero = Gradients::zeros_like(&model);
        sgd_step(&mut model, &zero, &config, 0).unwrap();
        assert!(norm(&model) < before);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::new(4, vec![8]);
        assert!(c.validate().is_ok());
        c.momentum = 1.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::new(0, vec![8]);
        assert!(c.validate().is_err());
        c.batch_size = 1;
        c.lr_factor = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_defaults_from_json() {
        let c: TrainConfig = serde_json::from_str(r#"{"batch_size": 16}"#).unwrap();
        assert_eq!(c.learning_rate, 0.001);
        assert_eq!(c.momentum, 0.9);
        assert_eq!(c.weight_decay, 0.0005);
        assert_eq!(c.lr_factor, 0.1);
        assert!(serde_json::from_str::<TrainConfig>("{}").is_err());
    }

    #[test]
    fn init_has_zero_momentum_and_zero_bias() {
        let model = ModelParams::init(5, &[7, 3], 4, 0.01, 42).unwrap();
        assert!(model.velocity().iter().all(|v| v.values().all(|&x| x == 0.0)));
        assert!(model.layers().iter().all(|l| l.bias().iter().all(|&b| b == 0.0)));
        assert_eq!(model.num_classes(), 4);
        assert_eq!(model.embedding_layer(), Some(1));
        assert_eq!(model.embedding_dim(), 3);
    }

    #[test]
    fn checkpoint_rejects_mismatched_shapes() {
        let model = ModelParams::init(2, &[3], 2, 0.1, 1).unwrap();
        let ckpt = Checkpoint::new(model, "abc", 1);
        let mut v: serde_json::Value = serde_json::from_str(&ckpt.to_json().unwrap()).unwrap();
        v["model"]["layers"][1]["in_dim"] = serde_json::json!(4);
        assert!(Checkpoint::from_json(&v.to_string()).is_err());
        let mut v: serde_json::Value = serde_json::from_str(&ckpt.to_json().unwrap()).unwrap();
        v["version"] = serde_json::json!(99);
        assert!(Checkpoint::from_json(&v.to_string()).is_err());
    }
}
