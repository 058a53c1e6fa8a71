//! Dense ReLU networks (linear and logistic models are the one-layer case),
//! their input and parameter gradients, and SGD training.
//!
//! A model with a single output is a binary classifier: the logit `g` decides
//! class 1 (label `+1`) when positive and class 0 (label `−1`) when negative.
//! Equivalently the two class logits are `(0, g)`.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};
use crate::io_util::{sha256_hex, write_atomic, Reader};
use crate::seeding::{self, child_seed};

const CKPT_MAGIC: &[u8; 4] = b"BMCK";
const CKPT_VERSION: u32 = 1;
const STREAM_INIT: u64 = 11;
const STREAM_SHUFFLE: u64 = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Linear,
    Logistic,
    Mlp,
}

impl ModelKind {
    fn code(self) -> u8 {
        match self {
            ModelKind::Linear => 0,
            ModelKind::Logistic => 1,
            ModelKind::Mlp => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(ModelKind::Linear),
            1 => Ok(ModelKind::Logistic),
            2 => Ok(ModelKind::Mlp),
            other => Err(Error::Format(format!("unknown model kind code {other}"))),
        }
    }
}

/// Affine layer `z = W a + b`, with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self { weight: Array2::zeros((output, input)), bias: Array1::zeros(output) }
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub kind: ModelKind,
    pub layers: Vec<Dense>,
}

/// Forward pass intermediates for one batch.
struct Trace {
    /// Layer inputs: `inputs[0]` is the batch, `inputs[l]` the ReLU output of layer `l−1`.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of every layer; the last entry holds the logits.
    pre: Vec<Array2<f64>>,
}

impl Model {
    /// Binary linear classifier `g(x) = wᵀx + b`.
    pub fn linear(weight: Array1<f64>, bias: f64) -> Self {
        let d = weight.len();
        let layer = Dense {
            weight: weight.into_shape_with_order((1, d)).expect("row vector"),
            bias: Array1::from_elem(1, bias),
        };
        Self { kind: ModelKind::Linear, layers: vec![layer] }
    }

    /// Zero-initialized logistic (or softmax) regression.
    pub fn logistic(input: usize, classes: usize) -> Self {
        let out = if classes <= 2 { 1 } else { classes };
        Self { kind: ModelKind::Logistic, layers: vec![Dense::zeros(input, out)] }
    }

    /// ReLU MLP with `dims = [input, hidden…, output]`, Kaiming-normal weights
    /// (`std = √(2/fan_in)`) and zero biases.
    pub fn mlp(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidParameter(format!("invalid layer dims {dims:?}")));
        }
        let mut rng = seeding::rng(child_seed(seed, STREAM_INIT));
        let layers = dims
            .windows(2)
            .map(|w| {
                let normal = Normal::new(0.0, (2.0 / w[0] as f64).sqrt()).expect("positive std");
                let weight = Array2::from_shape_simple_fn((w[1], w[0]), || normal.sample(&mut rng));
                Dense { weight, bias: Array1::zeros(w[1]) }
            })
            .collect();
        Ok(Self { kind: ModelKind::Mlp, layers })
    }

    /// Checks that consecutive layers chain and parameters are finite.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidParameter("model has no layers".into()));
        }
        for pair in self.layers.windows(2) {
            if pair[0].weight.nrows() != pair[1].weight.ncols() {
                return Err(Error::DimensionMismatch { expected: pair[0].weight.nrows(), got: pair[1].weight.ncols() });
            }
        }
        for l in &self.layers {
            if l.bias.len() != l.weight.nrows() {
                return Err(Error::DimensionMismatch { expected: l.weight.nrows(), got: l.bias.len() });
            }
            if l.weight.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter("non-finite parameter".into()));
            }
        }
        Ok(())
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(|l| l.weight.nrows()));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn num_outputs(&self) -> usize {
        self.layers.last().expect("non-empty").weight.nrows()
    }

    pub fn num_classes(&self) -> usize {
        match self.num_outputs() {
            1 => 2,
            n => n,
        }
    }

    pub fn is_binary(&self) -> bool {
        self.num_outputs() == 1
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Dense::num_params).sum()
    }

    /// Class index of a dataset label: `±1 → {1, 0}` for binary models.
    pub fn class_of_label(&self, label: i64) -> usize {
        if self.is_binary() {
            usize::from(label > 0)
        } else {
            label as usize
        }
    }

    pub fn label_of_class(&self, class: usize) -> i64 {
        if self.is_binary() {
            if class == 1 {
                1
            } else {
                -1
            }
        } else {
            class as i64
        }
    }

    fn check_input(&self, len: usize) -> Result<()> {
        if len != self.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.input_dim(), got: len });
        }
        Ok(())
    }

    fn trace(&self, batch: ArrayView2<'_, f64>) -> Trace {
        let mut inputs = vec![batch.to_owned()];
        let mut pre = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = inputs[i].dot(&layer.weight.t());
            z += &layer.bias;
            if i + 1 < self.layers.len() {
                inputs.push(z.mapv(|v| v.max(0.0)));
            }
            pre.push(z);
        }
        Trace { inputs, pre }
    }

    /// Logits for every row of `batch`.
    pub fn forward_batch(&self, batch: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(batch.ncols())?;
        let mut a = batch.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = a.dot(&layer.weight.t());
            z += &layer.bias;
            if i + 1 < self.layers.len() {
                z.mapv_inplace(|v| v.max(0.0));
            }
            a = z;
        }
        Ok(a)
    }

    pub fn forward(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        let out = self.forward_batch(x.insert_axis(Axis(0)))?;
        Ok(out.row(0).to_owned())
    }

    /// Decision for a logit vector; `None` on an exact tie.
    pub fn decide(&self, logits: ArrayView1<'_, f64>) -> Option<usize> {
        if self.is_binary() {
            let g = logits[0];
            return if g > 0.0 {
                Some(1)
            } else if g < 0.0 {
                Some(0)
            } else {
                None
            };
        }
        let mut best = 0;
        for k in 1..logits.len() {
            if logits[k] > logits[best] {
                best = k;
            }
        }
        let ties = logits.iter().filter(|&&v| v == logits[best]).count();
        (ties == 1).then_some(best)
    }

    pub fn predict(&self, x: ArrayView1<'_, f64>) -> Result<Option<usize>> {
        Ok(self.decide(self.forward(x)?.view()))
    }

    /// Backpropagates `seeds` (`n × out`, one row per sample, or `out × out`
    /// seeds for a single sample) to the input.
    fn backprop_input(&self, trace: &Trace, mut grad: Array2<f64>) -> Array2<f64> {
        for i in (0..self.layers.len()).rev() {
            grad = grad.dot(&self.layers[i].weight);
            if i > 0 {
                let mask = &trace.pre[i - 1];
                if mask.nrows() == grad.nrows() {
                    grad.zip_mut_with(mask, |g, &z| {
                        if z <= 0.0 {
                            *g = 0.0
                        }
                    });
                } else {
                    // one sample, several seed rows
                    let m = mask.row(0);
                    for mut row in grad.outer_iter_mut() {
                        row.zip_mut_with(&m, |g, &z| {
                            if z <= 0.0 {
                                *g = 0.0
                            }
                        });
                    }
                }
            }
        }
        grad
    }

    /// Logits and the full input Jacobian (`out × D`) at `x`.
    pub fn logits_and_jacobian(&self, x: ArrayView1<'_, f64>) -> Result<(Array1<f64>, Array2<f64>)> {
        self.check_input(x.len())?;
        let trace = self.trace(x.insert_axis(Axis(0)));
        let logits = trace.pre.last().expect("non-empty").row(0).to_owned();
        let jac = self.backprop_input(&trace, Array2::eye(self.num_outputs()));
        Ok((logits, jac))
    }

    /// `∇ₓ (f_k − f_l)`. At ReLU kinks this is the one-sided subgradient with
    /// inactive units at exactly zero pre-activation.
    pub fn grad_logit_diff(&self, x: ArrayView1<'_, f64>, k: usize, l: usize) -> Result<Array1<f64>> {
        let classes = self.num_classes();
        for idx in [k, l] {
            if idx >= classes {
                return Err(Error::InvalidClass { index: idx, classes });
            }
        }
        let (_, jac) = self.logits_and_jacobian(x)?;
        Ok(if self.is_binary() {
            let coeff = (k == 1) as i32 as f64 - (l == 1) as i32 as f64;
            jac.row(0).mapv(|v| v * coeff)
        } else {
            &jac.row(k) - &jac.row(l)
        })
    }

    /// Mean cross-entropy over a batch and the number of correct decisions.
    /// Returns `dLoss/dlogits` (already divided by the batch size).
    fn loss_head(&self, logits: &Array2<f64>, classes: &[usize]) -> (f64, usize, Array2<f64>) {
        let n = logits.nrows();
        let inv = 1.0 / n as f64;
        let mut loss = 0.0;
        let mut correct = 0;
        let mut grad = Array2::<f64>::zeros(logits.raw_dim());
        if self.is_binary() {
            for (i, &c) in classes.iter().enumerate() {
                let g = logits[[i, 0]];
                let t = if c == 1 { 1.0 } else { -1.0 };
                let m = -t * g;
                loss += m.max(0.0) + (-m.abs()).exp().ln_1p();
                grad[[i, 0]] = -t * sigmoid(m) * inv;
                if g * t > 0.0 {
                    correct += 1;
                }
            }
        } else {
            for (i, &c) in classes.iter().enumerate() {
                let row = logits.row(i);
                let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                loss += max + sum.ln() - row[c];
                for (k, g) in grad.row_mut(i).iter_mut().enumerate() {
                    let p = (row[k] - max).exp() / sum;
                    *g = (p - if k == c { 1.0 } else { 0.0 }) * inv;
                }
                if self.decide(row) == Some(c) {
                    correct += 1;
                }
            }
        }
        (loss * inv, correct, grad)
    }

    /// Mean loss, correct count and parameter gradients for a batch.
    pub fn loss_and_grads(&self, batch: ArrayView2<'_, f64>, classes: &[usize]) -> Result<(f64, usize, Vec<Dense>)> {
        self.check_input(batch.ncols())?;
        let trace = self.trace(batch);
        let (loss, correct, mut delta) = self.loss_head(trace.pre.last().expect("non-empty"), classes);
        let mut grads = Vec::with_capacity(self.layers.len());
        for i in (0..self.layers.len()).rev() {
            let weight = delta.t().dot(&trace.inputs[i]);
            let bias = delta.sum_axis(Axis(0));
            if i > 0 {
                delta = delta.dot(&self.layers[i].weight);
                delta.zip_mut_with(&trace.pre[i - 1], |g, &z| {
                    if z <= 0.0 {
                        *g = 0.0
                    }
                });
            }
            grads.push(Dense { weight, bias });
        }
        grads.reverse();
        Ok((loss, correct, grads))
    }

    /// Loss of a single sample and its gradient with respect to the input.
    pub fn loss_input_grad(&self, x: ArrayView1<'_, f64>, class: usize) -> Result<(f64, Array1<f64>)> {
        self.check_input(x.len())?;
        if class >= self.num_classes() {
            return Err(Error::InvalidClass { index: class, classes: self.num_classes() });
        }
        let trace = self.trace(x.insert_axis(Axis(0)));
        let (loss, _, delta) = self.loss_head(trace.pre.last().expect("non-empty"), &[class]);
        let g = self.backprop_input(&trace, delta);
        Ok((loss, g.row(0).to_owned()))
    }

    /// Mean loss over a dataset.
    pub fn dataset_loss(&self, ds: &LabeledDataset) -> Result<f64> {
        let classes: Vec<usize> = ds.labels.iter().map(|&y| self.class_of_label(y)).collect();
        let logits = self.forward_batch(ds.features.view())?;
        Ok(self.loss_head(&logits, &classes).0)
    }

    /// Parameters flattened layer by layer (weights row-major, then bias).
    pub fn params_flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied())
            .collect()
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::DimensionMismatch { expected: self.num_params(), got: params.len() });
        }
        let mut it = params.iter().copied();
        for l in &mut self.layers {
            for v in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                *v = it.next().expect("length checked");
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let dims = self.layer_dims();
        let mut out = Vec::with_capacity(16 + 8 * dims.len() + 8 * self.num_params());
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.push(self.kind.code());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for d in dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in self.params_flat() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "checkpoint");
        if r.take(4)? != CKPT_MAGIC {
            return Err(Error::Format("not a model checkpoint".into()));
        }
        let version = r.u32_le()?;
        if version != CKPT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let kind = ModelKind::from_code(r.take(1)?[0])?;
        let n_layers = r.u32_le()? as usize;
        let dims = (0..=n_layers).map(|_| r.u64_le().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let layers = dims.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        let mut model = Self { kind, layers };
        let params = (0..model.num_params()).map(|_| r.f64_le()).collect::<Result<Vec<_>>>()?;
        model.set_params_flat(&params)?;
        if r.remaining() != 0 {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// SHA-256 of the checkpoint bytes.
    pub fn hash(&self) -> String {
        sha256_hex(&self.to_bytes())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Fraction of samples whose decision matches the label.
pub fn accuracy(model: &Model, ds: &LabeledDataset) -> Result<f64> {
    let logits = model.forward_batch(ds.features.view())?;
    let correct = logits
        .outer_iter()
        .zip(&ds.labels)
        .filter(|(row, &y)| model.decide(*row) == Some(model.class_of_label(y)))
        .count();
    Ok(correct as f64 / ds.len() as f64)
}

/// Linear classifier after one gradient step from `w = 0` with unit step on
/// `Σ y⁽ⁱ⁾ f(x⁽ⁱ⁾)`: `w = Σ y⁽ⁱ⁾ x⁽ⁱ⁾`, zero bias.
pub fn linear_onestep(ds: &LabeledDataset) -> Result<Model> {
    if ds.labels.iter().any(|&y| y != 1 && y != -1) {
        return Err(Error::InvalidParameter("one-step construction needs labels in {-1, +1}".into()));
    }
    let mut w = Array1::<f64>::zeros(ds.dim());
    for (row, &y) in ds.features.outer_iter().zip(&ds.labels) {
        w.scaled_add(y as f64, &row);
    }
    Ok(Model::linear(w, 0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    /// `max_lr → 0` linearly over all steps.
    LinearDecay,
    /// Linear warmup to `max_lr` at 40% of the steps, then linear decay to 0.
    Triangular,
    /// `max_lr`, divided by 10 at 50% and again at 75% of the steps.
    PiecewiseConstant,
    Constant,
}

impl LrSchedule {
    pub fn rate(self, max_lr: f64, step: usize, total: usize) -> f64 {
        let p = step as f64 / total.max(1) as f64;
        match self {
            LrSchedule::LinearDecay => max_lr * (1.0 - p),
            LrSchedule::Triangular => {
                if p < 0.4 {
                    max_lr * p / 0.4
                } else {
                    max_lr * (1.0 - p) / 0.6
                }
            }
            LrSchedule::PiecewiseConstant => {
                if p < 0.5 {
                    max_lr
                } else if p < 0.75 {
                    max_lr / 10.0
                } else {
                    max_lr / 100.0
                }
            }
            LrSchedule::Constant => max_lr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    pub lr_schedule: LrSchedule,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Shuffling seed; experiment recipes derive it from their top-level seed.
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    /// Synthetic-data defaults: linearly decaying rate from 0.1, no regularization, 500 epochs.
    pub fn synthetic(seed: u64) -> Self {
        Self {
            epochs: 500,
            batch_size: 128,
            max_lr: 0.1,
            lr_schedule: LrSchedule::LinearDecay,
            momentum: 0.0,
            weight_decay: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch_size must be positive".into()));
        }
        if !(self.max_lr > 0.0) || !(self.momentum >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidParameter("need max_lr > 0, momentum >= 0, weight_decay >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
}

/// SGD with heavy-ball momentum and L2 weight decay (added to the gradient).
pub struct Sgd {
    config: TrainConfig,
    velocity: Vec<Dense>,
    step: usize,
    total_steps: usize,
}

impl Sgd {
    pub fn new(model: &Model, config: TrainConfig, total_steps: usize) -> Self {
        let velocity = model.layers.iter().map(|l| Dense::zeros(l.weight.ncols(), l.weight.nrows())).collect();
        Self { config, velocity, step: 0, total_steps }
    }

    pub fn current_lr(&self) -> f64 {
        self.config.lr_schedule.rate(self.config.max_lr, self.step, self.total_steps)
    }

    pub fn apply(&mut self, model: &mut Model, grads: &[Dense]) {
        let lr = self.current_lr();
        let (mu, wd) = (self.config.momentum, self.config.weight_decay);
        for ((layer, grad), vel) in model.layers.iter_mut().zip(grads).zip(&mut self.velocity) {
            let pairs = [(&mut layer.weight.view_mut(), &grad.weight.view(), &mut vel.weight.view_mut())];
            for (p, g, v) in pairs {
                ndarray::Zip::from(p).and(g).and(v).for_each(|p, &g, v| {
                    *v = mu * *v + g + wd * *p;
                    *p -= lr * *v;
                });
            }
            ndarray::Zip::from(&mut layer.bias).and(&grad.bias).and(&mut vel.bias).for_each(|p, &g, v| {
                *v = mu * *v + g + wd * *p;
                *p -= lr * *v;
            });
        }
        self.step += 1;
    }
}

/// Number of mini-batches per epoch.
pub fn batches_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

/// Trains `model` from its current parameters. Deterministic given the seed.
pub fn train_sgd(
    model: Model,
    train: &LabeledDataset,
    test: Option<&LabeledDataset>,
    config: &TrainConfig,
) -> Result<(Model, Vec<EpochStats>)> {
    train_with(model, train, test, config, |_, _, _, batch| Ok(batch))
}

/// The SGD loop behind [`train_sgd`]. Before each step `hook(model, epoch,
/// sample_ids, batch)` may replace the mini-batch (adversarial training).
pub fn train_with<F>(
    mut model: Model,
    train: &LabeledDataset,
    test: Option<&LabeledDataset>,
    config: &TrainConfig,
    mut hook: F,
) -> Result<(Model, Vec<EpochStats>)>
where
    F: FnMut(&Model, usize, &[usize], Array2<f64>) -> Result<Array2<f64>>,
{
    config.validate()?;
    model.validate()?;
    if train.dim() != model.input_dim() {
        return Err(Error::DimensionMismatch { expected: model.input_dim(), got: train.dim() });
    }
    let n = train.len();
    let classes: Vec<usize> = train.labels.iter().map(|&y| model.class_of_label(y)).collect();
    if let Some(&bad) = classes.iter().find(|&&c| c >= model.num_classes()) {
        return Err(Error::InvalidClass { index: bad, classes: model.num_classes() });
    }
    let total = config.epochs * batches_per_epoch(n, config.batch_size);
    let mut sgd = Sgd::new(&model, *config, total);
    let mut rng = seeding::rng(child_seed(config.seed, STREAM_SHUFFLE));
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch = hook(&model, epoch, chunk, train.features.select(Axis(0), chunk))?;
            let batch_classes: Vec<usize> = chunk.iter().map(|&i| classes[i]).collect();
            let (loss, c, grads) = model.loss_and_grads(batch.view(), &batch_classes)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            loss_sum += loss * chunk.len() as f64;
            correct += c;
            sgd.apply(&mut model, &grads);
        }
        if model.layers.iter().any(|l| l.weight.iter().any(|v| !v.is_finite())) {
            return Err(Error::Diverged { epoch });
        }
        let test_acc = test.map(|t| accuracy(&model, t)).transpose()?;
        let stats = EpochStats { epoch, loss: loss_sum / n as f64, train_acc: correct as f64 / n as f64, test_acc };
        log::debug!("epoch {epoch}: loss {:.5} acc {:.4}", stats.loss, stats.train_acc);
        history.push(stats);
    }
    Ok((model, history))
}

/// Continues training an existing model; the same loop as [`train_sgd`].
pub fn finetune(
    model: Model,
    train: &LabeledDataset,
    test: Option<&LabeledDataset>,
    config: &TrainConfig,
) -> Result<(Model, Vec<EpochStats>)> {
    train_sgd(model, train, test, config)
}

/// History rows as CSV (`epoch,loss,train_acc,test_acc`).
pub fn history_csv(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,loss,train_acc,test_acc\n");
    for h in history {
        let test = h.test_acc.map(|v| format!("{v}")).unwrap_or_default();
        out.push_str(&format!("{},{},{},{}\n", h.epoch, h.loss, h.train_acc, test));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{gen_t1, gen_t1_with_rotation, Source, T1Params};
    use crate::subspace::OrthonormalMatrix;
    use ndarray::array;
    use rand::Rng;

    fn rand_vec(n: usize, rng: &mut impl Rng) -> Array1<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn linear_forward() {
        let m = Model::linear(array![3.0, 4.0], 0.0);
        assert_eq!(m.forward(array![1.0, 1.0].view()).unwrap(), array![7.0]);
        assert!(matches!(m.forward(array![1.0].view()), Err(Error::DimensionMismatch { .. })));
        let g = m.grad_logit_diff(array![-2.0, 9.0].view(), 1, 0).unwrap();
        assert_eq!(g, array![3.0, 4.0]);
        assert!(matches!(m.grad_logit_diff(array![0.0, 0.0].view(), 2, 0), Err(Error::InvalidClass { .. })));
    }

    #[test]
    fn zero_mlp_ties() {
        let mut m = Model::mlp(&[4, 5, 3], 1).unwrap();
        let zeros = vec![0.0; m.num_params()];
        m.set_params_flat(&zeros).unwrap();
        let out = m.forward(array![1.0, 2.0, 3.0, 4.0].view()).unwrap();
        assert!(out.iter().all(|&v| v == out[0]));
        assert_eq!(m.decide(out.view()), None);
    }

    #[test]
    fn random_mlp_is_finite() {
        let m = Model::mlp(&[10, 32, 32, 4], 3).unwrap();
        let mut rng = seeding::rng(2);
        for _ in 0..20 {
            let x = rand_vec(10, &mut rng) * 100.0;
            assert!(m.forward(x.view()).unwrap().iter().all(|v| v.is_finite()));
        }
    }

    /// Central differences of `f` at `x`.
    fn fd_grad(f: impl Fn(&Array1<f64>) -> f64, x: &Array1<f64>, h: f64) -> Array1<f64> {
        (0..x.len())
            .map(|i| {
                let mut a = x.clone();
                let mut b = x.clone();
                a[i] += h;
                b[i] -= h;
                (f(&a) - f(&b)) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
        let diff = (a - b).mapv(|v| v * v).sum().sqrt();
        diff / a.mapv(|v| v * v).sum().sqrt().max(b.mapv(|v| v * v).sum().sqrt()).max(1e-12)
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let m = Model::mlp(&[6, 12, 12, 4], 9).unwrap();
        let mut rng = seeding::rng(4);
        for _ in 0..20 {
            let x = rand_vec(6, &mut rng);
            let g = m.grad_logit_diff(x.view(), 2, 0).unwrap();
            let fd = fd_grad(|v| {
                let o = m.forward(v.view()).unwrap();
                o[2] - o[0]
            }, &x, 1e-4);
            assert!(rel_err(&g, &fd) < 1e-4);
        }
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let m = Model::mlp(&[1, 3, 1], 5).unwrap();
        assert_eq!(m.num_params(), 10);
        let batch = array![[0.7], [-1.3], [0.2]];
        let classes = [1, 0, 1];
        let (_, _, grads) = m.loss_and_grads(batch.view(), &classes).unwrap();
        let analytic: Array1<f64> = grads.iter().flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied()).collect();
        let p0 = Array1::from(m.params_flat());
        let fd = fd_grad(|p| {
            let mut mm = m.clone();
            mm.set_params_flat(p.as_slice().unwrap()).unwrap();
            mm.loss_and_grads(batch.view(), &classes).unwrap().0
        }, &p0, 1e-5);
        assert!(rel_err(&analytic, &fd) < 1e-4, "{analytic} vs {fd}");
    }

    #[test]
    fn loss_input_grad_matches_finite_differences() {
        let m = Model::mlp(&[5, 8, 3], 2).unwrap();
        let x = array![0.1, -0.4, 0.3, 0.9, -0.2];
        let (_, g) = m.loss_input_grad(x.view(), 2).unwrap();
        let fd = fd_grad(|v| m.loss_input_grad(v.view(), 2).unwrap().0, &x, 1e-5);
        assert!(rel_err(&g, &fd) < 1e-4);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = Model::mlp(&[3, 4, 2], 1).unwrap();
        let back = Model::from_bytes(&m.to_bytes()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.hash(), m.hash());
        assert!(Model::from_bytes(&m.to_bytes()[..20]).is_err());
    }

    #[test]
    fn onestep_closed_form() {
        let p = T1Params { epsilon: 5.0, sigma: 1.0, n_samples: 1000, dim: 20, seed: 3 };
        let ds = gen_t1_with_rotation(p, Some(OrthonormalMatrix::identity(20))).unwrap();
        let m = linear_onestep(&ds).unwrap();
        assert_eq!(m.layers[0].weight[[0, 0]], 5000.0);

        let x = array![[1.0, 2.0]];
        let twin = LabeledDataset::new(
            ndarray::concatenate(Axis(0), &[x.view(), x.view()]).unwrap(),
            vec![1, -1],
            Source::Derived { description: "twin".into() },
        )
        .unwrap();
        assert_eq!(linear_onestep(&twin).unwrap().layers[0].weight, array![[0.0, 0.0]]);
    }

    #[test]
    fn onestep_noise_variance() {
        // Coordinates 2..D of Uᵀw are N(0, Nσ²).
        let (n, d, reps) = (400, 10, 200);
        let mut samples = Vec::new();
        for rep in 0..reps {
            let ds = gen_t1(T1Params { epsilon: 1.0, sigma: 1.5, n_samples: n, dim: d, seed: 1000 + rep }).unwrap();
            let w = linear_onestep(&ds).unwrap().layers[0].weight.row(0).to_owned();
            let canon = ds.rotation.as_ref().unwrap().matrix().t().dot(&w);
            samples.extend(canon.iter().skip(1).copied());
        }
        let var = samples.iter().map(|v| v * v).sum::<f64>() / samples.len() as f64;
        let expect = n as f64 * 1.5 * 1.5;
        assert!((var / expect - 1.0).abs() < 0.1, "{var} vs {expect}");
    }

    #[test]
    fn schedules() {
        assert_close!(LrSchedule::LinearDecay.rate(0.1, 0, 10), 0.1, 1e-15);
        assert_close!(LrSchedule::LinearDecay.rate(0.1, 5, 10), 0.05, 1e-15);
        assert_close!(LrSchedule::Triangular.rate(0.2, 4, 10), 0.2, 1e-15);
        assert_close!(LrSchedule::Triangular.rate(0.2, 2, 10), 0.1, 1e-15);
        assert_close!(LrSchedule::Triangular.rate(0.2, 7, 10), 0.1, 1e-15);
        assert_close!(LrSchedule::PiecewiseConstant.rate(1.0, 6, 10), 0.1, 1e-15);
        assert_close!(LrSchedule::PiecewiseConstant.rate(1.0, 8, 10), 0.01, 1e-15);
    }

    fn small_t1(seed: u64) -> LabeledDataset {
        gen_t1(T1Params { epsilon: 5.0, sigma: 1.0, n_samples: 400, dim: 20, seed }).unwrap()
    }

    fn quick(seed: u64, epochs: usize) -> TrainConfig {
        TrainConfig { epochs, batch_size: 32, max_lr: 0.05, ..TrainConfig::synthetic(seed) }
    }

    #[test]
    fn training_is_deterministic() {
        let ds = small_t1(1);
        let m0 = Model::mlp(&[20, 16, 1], 3).unwrap();
        let (a, ha) = train_sgd(m0.clone(), &ds, None, &quick(5, 3)).unwrap();
        let (b, hb) = train_sgd(m0, &ds, None, &quick(5, 3)).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(ha, hb);
        assert_eq!(ha.len(), 3);
    }

    #[test]
    fn logistic_fits_t1() {
        let ds = small_t1(2);
        let (m, _) = train_sgd(Model::logistic(20, 2), &ds, None, &quick(1, 20)).unwrap();
        assert_eq!(accuracy(&m, &ds).unwrap(), 1.0);
    }

    #[test]
    fn one_sample_loss_decreases() {
        let ds = LabeledDataset::new(array![[0.5, -1.0, 2.0]], vec![1], Source::Derived { description: "one".into() }).unwrap();
        let m = Model::mlp(&[3, 8, 1], 4).unwrap();
        let before = m.dataset_loss(&ds).unwrap();
        let cfg = TrainConfig { epochs: 1, batch_size: 1, max_lr: 0.01, ..TrainConfig::synthetic(0) };
        let (after, _) = train_sgd(m, &ds, None, &cfg).unwrap();
        assert!(after.dataset_loss(&ds).unwrap() < before);
    }

    #[test]
    fn zero_epoch_finetune_is_identity() {
        let ds = small_t1(3);
        let m = Model::mlp(&[20, 8, 1], 4).unwrap();
        let (out, hist) = finetune(m.clone(), &ds, None, &quick(0, 0)).unwrap();
        assert_eq!(out.to_bytes(), m.to_bytes());
        assert!(hist.is_empty());
    }

    #[test]
    fn tiny_lr_finetune_is_stable() {
        let ds = small_t1(4);
        let (m, _) = train_sgd(Model::mlp(&[20, 16, 1], 2).unwrap(), &ds, None, &quick(2, 10)).unwrap();
        let before = accuracy(&m, &ds).unwrap();
        let cfg = TrainConfig { epochs: 1, max_lr: 1e-4, ..quick(9, 1) };
        let (m2, _) = finetune(m, &ds, None, &cfg).unwrap();
        assert!((accuracy(&m2, &ds).unwrap() - before).abs() <= 0.01);
    }

    #[test]
    fn divergence_is_reported() {
        let ds = small_t1(5);
        let cfg = TrainConfig { epochs: 5, max_lr: 1e300, lr_schedule: LrSchedule::Constant, ..quick(0, 5) };
        let err = train_sgd(Model::mlp(&[20, 8, 8, 1], 1).unwrap(), &ds, None, &cfg).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }));
    }
}
