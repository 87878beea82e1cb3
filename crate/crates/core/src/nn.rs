//! Dense ReLU network engine: weight init, forward, softmax cross-entropy
//! backward, seeded mini-batch SGD with momentum, and argmax evaluation.
//!
//! All operations are pure functions of their inputs plus an explicit seed,
//! so parallel training of different participants is bit-identical to
//! sequential execution.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ParticipantShard;
use crate::error::{Error, Result};

/// Dimensions of one dense layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub fan_in: usize,
    pub fan_out: usize,
    #[serde(default = "default_true")]
    pub has_bias: bool,
}

fn default_true() -> bool {
    true
}

impl LayerShape {
    pub fn new(fan_in: usize, fan_out: usize) -> Self {
        LayerShape {
            fan_in,
            fan_out,
            has_bias: true,
        }
    }

    pub fn param_count(&self) -> usize {
        self.fan_in * self.fan_out + if self.has_bias { self.fan_out } else { 0 }
    }
}

/// Checks that shapes are non-degenerate and consecutive layers chain.
pub fn validate_chain(shapes: &[LayerShape]) -> Result<()> {
    if shapes.is_empty() {
        return Err(Error::Config("architecture has no layers".into()));
    }
    for (i, s) in shapes.iter().enumerate() {
        if s.fan_in == 0 || s.fan_out == 0 {
            return Err(Error::Config(format!(
                "layer {i} has zero dimension ({}x{})",
                s.fan_in, s.fan_out
            )));
        }
    }
    for (i, pair) in shapes.windows(2).enumerate() {
        if pair[0].fan_out != pair[1].fan_in {
            return Err(Error::Config(format!(
                "layer {i} fan_out {} != layer {} fan_in {}",
                pair[0].fan_out,
                i + 1,
                pair[1].fan_in
            )));
        }
    }
    Ok(())
}

/// One layer's parameters: a `fan_out x fan_in` weight matrix and a bias
/// vector (empty when the layer has no bias).
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTensor {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Ordered per-layer parameter tensors. The same container also carries
/// gradients and momentum velocities, which are weight-shaped.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub layers: Vec<LayerTensor>,
}

impl ModelWeights {
    pub fn zeros(shapes: &[LayerShape]) -> Result<Self> {
        validate_chain(shapes)?;
        let layers = shapes
            .iter()
            .map(|s| LayerTensor {
                weights: Array2::zeros((s.fan_out, s.fan_in)),
                bias: Array1::zeros(if s.has_bias { s.fan_out } else { 0 }),
            })
            .collect();
        Ok(ModelWeights { layers })
    }

    pub fn zeros_like(&self) -> Self {
        ModelWeights {
            layers: self
                .layers
                .iter()
                .map(|l| LayerTensor {
                    weights: Array2::zeros(l.weights.raw_dim()),
                    bias: Array1::zeros(l.bias.len()),
                })
                .collect(),
        }
    }

    pub fn shapes(&self) -> Vec<LayerShape> {
        self.layers
            .iter()
            .map(|l| LayerShape {
                fan_in: l.weights.ncols(),
                fan_out: l.weights.nrows(),
                has_bias: !l.bias.is_empty(),
            })
            .collect()
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// True when `other` has the same layer count and per-layer dimensions.
    pub fn conforms_to(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weights.raw_dim() == b.weights.raw_dim() && a.bias.len() == b.bias.len()
            })
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().all(|v| v.is_finite()) && l.bias.iter().all(|v| v.is_finite()))
    }

    /// `self += c * other`, element-wise across every layer.
    pub fn scaled_add_assign(&mut self, c: f64, other: &Self) {
        debug_assert!(self.conforms_to(other));
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.scaled_add(c, &b.weights);
            a.bias.scaled_add(c, &b.bias);
        }
    }

    /// `self *= c`, element-wise.
    pub fn scale(&mut self, c: f64) {
        for l in self.layers.iter_mut() {
            l.weights.mapv_inplace(|v| v * c);
            l.bias.mapv_inplace(|v| v * c);
        }
    }

    /// Values of one layer flattened as row-major weights then bias; the
    /// flatten convention used for layer distances and digests.
    pub fn layer_values(&self, layer: usize) -> impl Iterator<Item = f64> + '_ {
        let l = &self.layers[layer];
        l.weights.iter().copied().chain(l.bias.iter().copied())
    }

    /// 64-bit FNV-1a over the raw little-endian bytes of every parameter in
    /// layer order; a cheap fingerprint for reproducibility assertions.
    pub fn digest(&self) -> u64 {
        const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h = OFFSET;
        for layer in 0..self.layers.len() {
            for v in self.layer_values(layer) {
                for byte in v.to_le_bytes() {
                    h ^= u64::from(byte);
                    h = h.wrapping_mul(PRIME);
                }
            }
        }
        h
    }
}

/// Local-training settings. A zero learning rate is allowed and yields a
/// no-op update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if !self.momentum.is_finite() || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0,1), got {}",
                self.momentum
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Draws weights uniformly from `(-1/sqrt(fan_in), +1/sqrt(fan_in))` per
/// layer; biases start at zero. Deterministic given `seed`.
pub fn init_weights(shapes: &[LayerShape], seed: u64) -> Result<ModelWeights> {
    validate_chain(shapes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = shapes
        .iter()
        .map(|s| {
            let bound = 1.0 / (s.fan_in as f64).sqrt();
            let values: Vec<f64> = (0..s.fan_out * s.fan_in)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            LayerTensor {
                weights: Array2::from_shape_vec((s.fan_out, s.fan_in), values)
                    .expect("sized above"),
                bias: Array1::zeros(if s.has_bias { s.fan_out } else { 0 }),
            }
        })
        .collect();
    Ok(ModelWeights { layers })
}

/// Activations recorded by [`forward`] for the matching [`backward`] call.
pub struct ForwardCache {
    input: Array2<f64>,
    /// Pre-activation of every layer; the last entry is the logits.
    pre: Vec<Array2<f64>>,
    /// Post-ReLU activation of every hidden layer.
    post: Vec<Array2<f64>>,
}

/// Runs the network on a batch (one example per row). Hidden layers apply
/// ReLU; the final layer's pre-activation is returned as logits.
pub fn forward(weights: &ModelWeights, batch: &Array2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
    if weights.layers.is_empty() {
        return Err(Error::Shape("model has no layers".into()));
    }
    let fan_in = weights.layers[0].weights.ncols();
    if batch.ncols() != fan_in {
        return Err(Error::Shape(format!(
            "batch has {} columns, first layer expects {fan_in}",
            batch.ncols()
        )));
    }
    if batch.nrows() == 0 {
        return Err(Error::Shape("empty batch".into()));
    }

    let count = weights.layers.len();
    let mut pre = Vec::with_capacity(count);
    let mut post = Vec::with_capacity(count.saturating_sub(1));
    let mut activation = batch.clone();
    for (i, layer) in weights.layers.iter().enumerate() {
        let mut z = activation.dot(&layer.weights.t());
        if !layer.bias.is_empty() {
            z += &layer.bias;
        }
        if i + 1 < count {
            let a = z.mapv(|v| v.max(0.0));
            pre.push(z);
            post.push(a.clone());
            activation = a;
        } else {
            pre.push(z);
        }
    }
    let logits = pre.last().expect("at least one layer").clone();
    Ok((
        logits,
        ForwardCache {
            input: batch.clone(),
            pre,
            post,
        },
    ))
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    p
}

/// Gradient of mean softmax cross-entropy over the batch, in a
/// weight-shaped container.
pub fn backward(
    weights: &ModelWeights,
    cache: &ForwardCache,
    labels: &[usize],
) -> Result<ModelWeights> {
    let batch = cache.input.nrows();
    if labels.len() != batch {
        return Err(Error::Shape(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    let classes = weights
        .layers
        .last()
        .ok_or_else(|| Error::Shape("model has no layers".into()))?
        .weights
        .nrows();
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Data(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }

    let logits = cache.pre.last().expect("cache from forward");
    let mut dz = softmax_rows(logits);
    let scale = 1.0 / batch as f64;
    for (i, &y) in labels.iter().enumerate() {
        dz[[i, y]] -= 1.0;
    }
    dz.mapv_inplace(|v| v * scale);

    let mut grads = vec![
        LayerTensor {
            weights: Array2::zeros((0, 0)),
            bias: Array1::zeros(0),
        };
        weights.layers.len()
    ];
    for l in (0..weights.layers.len()).rev() {
        let prev_activation = if l == 0 { &cache.input } else { &cache.post[l - 1] };
        let gw = dz.t().dot(prev_activation);
        let gb = if weights.layers[l].bias.is_empty() {
            Array1::zeros(0)
        } else {
            dz.sum_axis(Axis(0))
        };
        grads[l] = LayerTensor { weights: gw, bias: gb };
        if l > 0 {
            let da = dz.dot(&weights.layers[l].weights);
            let mask = cache.pre[l - 1].mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
            dz = da * mask;
        }
    }
    Ok(ModelWeights { layers: grads })
}

/// Runs `hp.epochs` of shuffled mini-batch SGD with classical momentum
/// (`v <- momentum*v - lr*g; w <- w + v`) over the shard, starting from
/// `weights`. The input is unmodified; the last partial batch is kept.
pub fn local_train(
    weights: &ModelWeights,
    shard: &ParticipantShard,
    hp: &Hyperparams,
    seed: u64,
) -> Result<ModelWeights> {
    hp.validate()?;
    if shard.is_empty() {
        return Err(Error::Data(format!(
            "participant {} shard is empty",
            shard.participant_id
        )));
    }
    let fan_in = weights
        .layers
        .first()
        .ok_or_else(|| Error::Shape("model has no layers".into()))?
        .weights
        .ncols();
    if shard.features.ncols() != fan_in {
        return Err(Error::Shape(format!(
            "shard features have {} columns, model expects {fan_in}",
            shard.features.ncols()
        )));
    }

    let mut w = weights.clone();
    let mut velocity = weights.zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..shard.len()).collect();
    let dim = shard.features.ncols();

    for _ in 0..hp.epochs {
        order.shuffle(&mut rng);
        for batch_idx in order.chunks(hp.batch_size) {
            let mut bx = Array2::zeros((batch_idx.len(), dim));
            let mut by = Vec::with_capacity(batch_idx.len());
            for (row, &i) in batch_idx.iter().enumerate() {
                bx.row_mut(row).assign(&shard.features.row(i));
                by.push(shard.labels[i]);
            }
            let (_, cache) = forward(&w, &bx)?;
            let grad = backward(&w, &cache, &by)?;
            velocity.scale(hp.momentum);
            velocity.scaled_add_assign(-hp.learning_rate, &grad);
            w.scaled_add_assign(1.0, &velocity);
        }
    }
    Ok(w)
}

const EVAL_CHUNK: usize = 4096;

/// Fraction of argmax-correct predictions; ties break to the lowest class.
pub fn evaluate(weights: &ModelWeights, features: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    if features.nrows() == 0 {
        return Err(Error::Data("empty evaluation set".into()));
    }
    if features.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} rows vs {} labels",
            features.nrows(),
            labels.len()
        )));
    }
    let mut correct = 0usize;
    let mut start = 0;
    while start < features.nrows() {
        let end = (start + EVAL_CHUNK).min(features.nrows());
        let chunk = features.slice(ndarray::s![start..end, ..]).to_owned();
        let (logits, _) = forward(weights, &chunk)?;
        for (row, &label) in logits.rows().into_iter().zip(&labels[start..end]) {
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if v > best_v {
                    best_v = v;
                    best = j;
                }
            }
            if best == label {
                correct += 1;
            }
        }
        start = end;
    }
    Ok(correct as f64 / features.nrows() as f64)
}

/// Mean softmax cross-entropy of the model on a labeled set.
pub fn mean_loss(weights: &ModelWeights, features: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    if features.nrows() == 0 {
        return Err(Error::Data("empty evaluation set".into()));
    }
    if features.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} rows vs {} labels",
            features.nrows(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    let mut start = 0;
    while start < features.nrows() {
        let end = (start + EVAL_CHUNK).min(features.nrows());
        let chunk = features.slice(ndarray::s![start..end, ..]).to_owned();
        let (logits, _) = forward(weights, &chunk)?;
        for (row, &label) in logits.rows().into_iter().zip(&labels[start..end]) {
            if label >= row.len() {
                return Err(Error::Data(format!(
                    "label {label} out of range for {} classes",
                    row.len()
                )));
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse: f64 = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        start = end;
    }
    Ok(total / features.nrows() as f64)
}
